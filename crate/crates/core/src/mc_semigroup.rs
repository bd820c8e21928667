//! Monte Carlo estimators of semigroup-level quantities.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field_model::{
    build_augmentation, AugmentationSpec, AugmentedSystem, Block, Layout, ModelError, PerturbationSchedule,
    TestFunction, VectorFieldSet,
};
use crate::linalg;
use crate::sde_engine::{simulate_with, PathEnsemble, SimError, SimOptions, TimeGrid};

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Unsupported(String),
    #[error("{singular} of {n_paths} paths have a singular covariance")]
    Singular { singular: usize, n_paths: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Simulation budget shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Fine increments summed per step; see [`SimOptions::substeps`].
    #[serde(skip)]
    pub substeps: usize,
}

impl McConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
            threads: None,
            substeps: 1,
        }
    }

    /// Same Brownian paths on a grid with half as many steps, or `None` when
    /// `n_steps` is odd.
    pub fn coarsened(&self) -> Option<Self> {
        if !self.n_steps.is_multiple_of(2) || self.n_steps < 2 {
            return None;
        }
        Some(Self {
            n_steps: self.n_steps / 2,
            substeps: self.substeps.max(1) * 2,
            ..*self
        })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_steps(self, n_steps: usize) -> Self {
        Self { n_steps, ..self }
    }

    pub fn with_paths(self, n_paths: usize) -> Self {
        Self { n_paths, ..self }
    }

    pub fn grid(&self, t: f64) -> Result<TimeGrid, SimError> {
        TimeGrid::new(t, self.n_steps)
    }

    fn options(&self) -> SimOptions {
        SimOptions {
            record_trajectories: false,
            threads: self.threads,
            substeps: self.substeps,
        }
    }
}

/// Sample mean and standard error, ignoring `NaN` entries (voided paths).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        for v in samples.iter().filter(|v| !v.is_nan()) {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = sum / n as f64;
        let ss: f64 = samples
            .iter()
            .filter(|v| !v.is_nan())
            .map(|v| (v - mean) * (v - mean))
            .sum();
        let stderr = if n > 1 {
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }

    /// Statistics of `a − b` over indices where both are present.
    pub fn paired(a: &[f64], b: &[f64]) -> Self {
        let diff: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| if x.is_nan() || y.is_nan() { f64::NAN } else { x - y })
            .collect();
        Self::of(&diff)
    }

    /// Column `j` of flat `n × k` samples.
    pub fn column(samples: &[f64], k: usize, j: usize) -> Self {
        let col: Vec<f64> = samples.iter().skip(j).step_by(k).copied().collect();
        Self::of(&col)
    }
}

/// A Monte Carlo estimate of some `P_t`-type quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemigroupEstimate {
    pub descriptor: String,
    pub model: String,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

impl SemigroupEstimate {
    fn from_stats(
        descriptor: impl Into<String>,
        model: &str,
        t: f64,
        x: &[f64],
        stats: &[Stats],
        cfg: &McConfig,
    ) -> Self {
        Self {
            descriptor: descriptor.into(),
            model: model.to_string(),
            t,
            x: x.to_vec(),
            value: stats.iter().map(|s| s.mean).collect(),
            stderr: stats.iter().map(|s| s.stderr).collect(),
            n_paths: stats.first().map_or(0, |s| s.n),
            seed: cfg.seed,
        }
    }

    /// First component of the value.
    pub fn scalar(&self) -> f64 {
        self.value[0]
    }

    pub fn scalar_stderr(&self) -> f64 {
        self.stderr[0]
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";")
}

/// CSV rows `descriptor,model,t,x,value,stderr,n_paths,seed`; vector fields
/// are `;`-joined.
pub fn write_estimates_csv<W: Write>(out: W, estimates: &[SemigroupEstimate]) -> Result<(), McError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["descriptor", "model", "t", "x", "value", "stderr", "n_paths", "seed"])?;
    for e in estimates {
        w.write_record([
            e.descriptor.clone(),
            e.model.clone(),
            e.t.to_string(),
            join(&e.x),
            join(&e.value),
            join(&e.stderr),
            e.n_paths.to_string(),
            e.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| McError::Csv(e.into()))?;
    Ok(())
}

pub fn run_ensemble(system: &AugmentedSystem, z0: &[f64], t: f64, cfg: &McConfig) -> Result<PathEnsemble, McError> {
    let grid = cfg.grid(t)?;
    Ok(simulate_with(system, z0, &grid, cfg.n_paths, cfg.seed, &cfg.options())?)
}

fn warn_unbounded(f: &TestFunction) {
    if matches!(f.name(), "x" | "x2") {
        log::debug!("test function `{}` has polynomial growth", f.name());
    }
}

/// Per-path `f(x_T)` for the base system started at `x`.
pub fn semigroup_samples(
    vfs: &Arc<VectorFieldSet>,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, McError> {
    let sys = AugmentedSystem::base_system(vfs.clone());
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    Ok(ens.pathwise_functional(&[], |lay, z| f.eval(lay.x(z)))?)
}

/// Per-path `f(x_T)` for every `f` in `fs`, from one ensemble.
pub fn semigroup_samples_many(
    vfs: &Arc<VectorFieldSet>,
    fs: &[TestFunction],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<Vec<f64>>, McError> {
    let sys = AugmentedSystem::base_system(vfs.clone());
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    fs.iter()
        .map(|f| Ok(ens.pathwise_functional(&[], |lay, z| f.eval(lay.x(z)))?))
        .collect()
}

/// Per-path `f(x_T^h)` for every `f` in `fs`, from one perturbed ensemble.
pub fn perturbed_samples_many(
    vfs: &Arc<VectorFieldSet>,
    h: &PerturbationSchedule,
    fs: &[TestFunction],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<Vec<f64>>, McError> {
    let sys = AugmentedSystem::perturbed(vfs.clone(), h.clone())?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    fs.iter()
        .map(|f| Ok(ens.pathwise_functional(&[], |lay, z| f.eval(lay.x(z)))?))
        .collect()
}

/// `P_t f(x) = E[f(x_t(x))]`.
pub fn estimate_semigroup(
    vfs: &Arc<VectorFieldSet>,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<SemigroupEstimate, McError> {
    warn_unbounded(f);
    let s = semigroup_samples(vfs, f, x, t, cfg)?;
    Ok(SemigroupEstimate::from_stats(
        format!("P_t[{}]", f.name()),
        vfs.name(),
        t,
        x,
        &[Stats::of(&s)],
        cfg,
    ))
}

/// Per-path `f(x_T^h)` for the system with generator `L + Σ h_t^i X_i`.
pub fn perturbed_samples(
    vfs: &Arc<VectorFieldSet>,
    h: &PerturbationSchedule,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, McError> {
    let sys = AugmentedSystem::perturbed(vfs.clone(), h.clone())?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    Ok(ens.pathwise_functional(&[], |lay, z| f.eval(lay.x(z)))?)
}

/// `P_t^h f(x)` by simulating the perturbed drift directly.
pub fn estimate_perturbed(
    vfs: &Arc<VectorFieldSet>,
    h: &PerturbationSchedule,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<SemigroupEstimate, McError> {
    let s = perturbed_samples(vfs, h, f, x, t, cfg)?;
    Ok(SemigroupEstimate::from_stats(
        format!("P_t^h[{}] h={}", f.name(), h.label()),
        vfs.name(),
        t,
        x,
        &[Stats::of(&s)],
        cfg,
    ))
}

/// The weight coordinate `u_T` (first component).
pub fn weight_u(layout: &Layout, z: &[f64]) -> f64 {
    layout.get(z, Block::Weight).map_or(f64::NAN, |w| w[0])
}

/// Per-path `weight(z_T) · f(x_T)` for the lift `spec` started at `(x, u_0)`.
pub fn weighted_samples<W>(
    spec: &AugmentationSpec,
    weight: W,
    f: &TestFunction,
    x: &[f64],
    u0: f64,
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, McError>
where
    W: Fn(&Layout, &[f64]) -> f64 + Sync,
{
    let sys = build_augmentation(spec)?;
    let mut z0 = sys.initial_state(x)?;
    sys.set_weight(&mut z0, u0);
    let ens = run_ensemble(&sys, &z0, t, cfg)?;
    Ok(ens.pathwise_functional(&[], |lay, z| weight(lay, z) * f.eval(lay.x(z)))?)
}

/// Per-path `u_T f(x_T)` for every `f` in `fs`, from one ensemble of the lift
/// `spec` started at `(x, u_0)`.
pub fn weighted_samples_many(
    spec: &AugmentationSpec,
    fs: &[TestFunction],
    x: &[f64],
    u0: f64,
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<Vec<f64>>, McError> {
    let sys = build_augmentation(spec)?;
    let mut z0 = sys.initial_state(x)?;
    sys.set_weight(&mut z0, u0);
    let ens = run_ensemble(&sys, &z0, t, cfg)?;
    fs.iter()
        .map(|f| Ok(ens.pathwise_functional(&[Block::Weight], |lay, z| weight_u(lay, z) * f.eval(lay.x(z)))?))
        .collect()
}

/// `E[weight · f(x_T)]` over the lift `spec` started at `(x, u_0)`; with the
/// weight `u_T` this is `\tilde P_t^h[uf](x, u_0)` (Girsanov) or
/// `\bar P_t^h[uf](x, u_0)` (integration by parts).
#[allow(clippy::too_many_arguments)]
pub fn estimate_weighted<W>(
    spec: &AugmentationSpec,
    weight: W,
    f: &TestFunction,
    x: &[f64],
    u0: f64,
    t: f64,
    cfg: &McConfig,
) -> Result<SemigroupEstimate, McError>
where
    W: Fn(&Layout, &[f64]) -> f64 + Sync,
{
    let s = weighted_samples(spec, weight, f, x, u0, t, cfg)?;
    Ok(SemigroupEstimate::from_stats(
        format!("{:?}[w*{}] u0={u0}", spec.kind, f.name()),
        spec.base.name(),
        t,
        x,
        &[Stats::of(&s)],
        cfg,
    ))
}

fn gradient_row(f: &TestFunction, lay: &Layout, z: &[f64], out: &mut [f64]) {
    let d = lay.dim();
    let mut g = vec![0.0; d];
    if !f.gradient_into(lay.x(z), &mut g) {
        g = f
            .gradient_or_fd(lay.x(z), true)
            .expect("finite differences always available");
    }
    let u = lay.get(z, Block::Jacobian).expect("jacobian block");
    linalg::vecmat(&g, u, out, d);
}

/// Per-path `Df(x_T) U_T`, flat `n_paths × d`.
pub fn gradient_samples(
    vfs: &Arc<VectorFieldSet>,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, McError> {
    let sys = build_augmentation(&AugmentationSpec::jacobian(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    Ok(ens.pathwise_vector(&[Block::Jacobian], vfs.dim(), |lay, z, o| gradient_row(f, lay, z, o))?)
}

/// Per-path `Df(x_T) U_T` (flat `n_paths × d`) for every `f` in `fs`.
pub fn gradient_samples_many(
    vfs: &Arc<VectorFieldSet>,
    fs: &[TestFunction],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<Vec<f64>>, McError> {
    let sys = build_augmentation(&AugmentationSpec::jacobian(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    fs.iter()
        .map(|f| Ok(ens.pathwise_vector(&[Block::Jacobian], vfs.dim(), |lay, z, o| gradient_row(f, lay, z, o))?))
        .collect()
}

/// `D P_t f(x) = E[Df(x_T) U_T]` over the Jacobian lift started at `(x, I)`.
pub fn estimate_gradient(
    vfs: &Arc<VectorFieldSet>,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<SemigroupEstimate, McError> {
    if !f.has_gradient() {
        log::warn!("`{}` has no closed-form gradient; using finite differences", f.name());
    }
    let d = vfs.dim();
    let s = gradient_samples(vfs, f, x, t, cfg)?;
    let stats: Vec<Stats> = (0..d).map(|j| Stats::column(&s, d, j)).collect();
    Ok(SemigroupEstimate::from_stats(
        format!("E[D{} U]", f.name()),
        vfs.name(),
        t,
        x,
        &stats,
        cfg,
    ))
}

/// Both sides of the first-order Bismut integration by parts, with samples.
#[derive(Debug, Clone)]
pub struct BismutPair {
    pub lhs: SemigroupEstimate,
    pub rhs: SemigroupEstimate,
    /// `rhs − lhs`, computed pathwise.
    pub difference: SemigroupEstimate,
    pub lhs_samples: Vec<f64>,
    pub rhs_samples: Vec<f64>,
}

/// Per-path `(Df(x_T) U_T V_T, f(x_T) u_T)`, each flat `n_paths × d`, for
/// every `f` in `fs`, from one feedback-lift ensemble.
pub fn bismut_samples_many(
    vfs: &Arc<VectorFieldSet>,
    fs: &[TestFunction],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, McError> {
    let d = vfs.dim();
    let sys = build_augmentation(&AugmentationSpec::bismut(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    fs.iter()
        .map(|f| {
            let lhs = ens.pathwise_vector(&[Block::Jacobian, Block::Covariance], d, |lay, z, o| {
                let mut row = vec![0.0; d];
                gradient_row(f, lay, z, &mut row);
                linalg::vecmat(&row, lay.get(z, Block::Covariance).unwrap(), o, d);
            })?;
            let rhs = ens.pathwise_vector(&[Block::Weight], d, |lay, z, o| {
                let fx = f.eval(lay.x(z));
                for (oi, ui) in o.iter_mut().zip(lay.get(z, Block::Weight).unwrap()) {
                    *oi = fx * ui;
                }
            })?;
            Ok((lhs, rhs))
        })
        .collect()
}

/// From one feedback-lift ensemble: `lhs = E[Df(x_T) U_T V_T]`,
/// `rhs = E[f(x_T) u_T]` with `u_T = Σ_i ∫ U_s^{-1} X_i(x_s) dw_s^i`.
pub fn bismut_pair(
    vfs: &Arc<VectorFieldSet>,
    f: &TestFunction,
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<BismutPair, McError> {
    let d = vfs.dim();
    if vfs.ellipticity_margin(x, 64)? == 0.0 {
        log::warn!("model `{}` is not elliptic at {x:?}", vfs.name());
    }
    let (lhs, rhs) = bismut_samples_many(vfs, std::slice::from_ref(f), x, t, cfg)?.remove(0);
    let col = |s: &[f64]| -> Vec<Stats> { (0..d).map(|j| Stats::column(s, d, j)).collect() };
    let diff_stats: Vec<Stats> = (0..d)
        .map(|j| {
            let a: Vec<f64> = rhs.iter().skip(j).step_by(d).copied().collect();
            let b: Vec<f64> = lhs.iter().skip(j).step_by(d).copied().collect();
            Stats::paired(&a, &b)
        })
        .collect();
    let name = f.name();
    Ok(BismutPair {
        lhs: SemigroupEstimate::from_stats(format!("E[D{name} U V]"), vfs.name(), t, x, &col(&lhs), cfg),
        rhs: SemigroupEstimate::from_stats(format!("E[{name} u]"), vfs.name(), t, x, &col(&rhs), cfg),
        difference: SemigroupEstimate::from_stats(
            format!("E[{name} u - D{name} U V]"),
            vfs.name(),
            t,
            x,
            &diff_stats,
            cfg,
        ),
        lhs_samples: lhs,
        rhs_samples: rhs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    U,
    UInverse,
    V,
    VInverse,
}

/// Empirical `E[|Z|^p]` (Frobenius norm) with stability diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub component: Component,
    pub exponents: Vec<f64>,
    pub moments: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Same moments over the first half of the paths.
    pub half_sample_moments: Vec<f64>,
    /// Largest single-path share of `Σ |Z|^p`, per exponent.
    pub tail_fraction: Vec<f64>,
    pub singular: usize,
    pub n_paths: usize,
}

impl MomentReport {
    /// Largest relative change between half-sample and full-sample moments.
    pub fn doubling_change(&self) -> f64 {
        self.moments
            .iter()
            .zip(&self.half_sample_moments)
            .map(|(full, half)| {
                if *full == 0.0 {
                    half.abs()
                } else {
                    ((full - half) / full).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Relative eigenvalue floor below which a covariance counts as singular.
pub const SINGULAR_FLOOR: f64 = 1e-10;

fn component_norm(component: Component, lay: &Layout, z: &[f64]) -> f64 {
    let d = lay.dim();
    let block = match component {
        Component::U => Block::Jacobian,
        Component::UInverse => Block::InverseJacobian,
        Component::V | Component::VInverse => Block::Covariance,
    };
    let m = lay.get(z, block).expect("component present");
    match component {
        Component::VInverse => match linalg::symmetric_inverse(m, d, SINGULAR_FLOOR) {
            Some(inv) => linalg::frobenius(&inv),
            None => f64::INFINITY,
        },
        _ => linalg::frobenius(m),
    }
}

pub fn moments_from_norms(component: Component, norms: &[f64], exponents: &[f64]) -> Result<MomentReport, McError> {
    let singular = norms.iter().filter(|v| v.is_infinite()).count();
    let n_paths = norms.len();
    if singular as f64 > 0.01 * n_paths as f64 {
        return Err(McError::Singular { singular, n_paths });
    }
    let kept: Vec<f64> = norms.iter().copied().filter(|v| v.is_finite()).collect();
    let half = &kept[..kept.len() / 2];
    let mut report = MomentReport {
        component,
        exponents: exponents.to_vec(),
        moments: vec![],
        stderr: vec![],
        half_sample_moments: vec![],
        tail_fraction: vec![],
        singular,
        n_paths,
    };
    for &p in exponents {
        let pw: Vec<f64> = kept.iter().map(|v| if p == 0.0 { 1.0 } else { v.powf(p) }).collect();
        let s = Stats::of(&pw);
        let total: f64 = pw.iter().sum();
        let top = pw.iter().fold(0.0f64, |a, b| a.max(*b));
        report.moments.push(s.mean);
        report.stderr.push(s.stderr);
        report.tail_fraction.push(if total > 0.0 { top / total } else { 0.0 });
        let hp: Vec<f64> = half.iter().map(|v| if p == 0.0 { 1.0 } else { v.powf(p) }).collect();
        report.half_sample_moments.push(Stats::of(&hp).mean);
    }
    Ok(report)
}

/// Empirical moments of `U`, `U^{-1}`, `V` or `V^{-1}` at time `t`.
/// Paths with numerically singular `V` are counted; more than 1% is an error.
pub fn estimate_moments(
    vfs: &Arc<VectorFieldSet>,
    component: Component,
    exponents: &[f64],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<MomentReport, McError> {
    let sys = build_augmentation(&AugmentationSpec::malliavin(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    let norms = ens.pathwise_functional(&[], |lay, z| component_norm(component, lay, z))?;
    let norms: Vec<f64> = norms.into_iter().filter(|v| !v.is_nan()).collect();
    moments_from_norms(component, &norms, exponents)
}

/// Small-ball profile of `|V_T ξ|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallBallReport {
    pub direction: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `E[g(|V_T ξ| / ε)]` with the smoothed indicator `g(u) = exp(−u)`.
    pub smoothed: Vec<f64>,
    /// Resolution floor `5 / n_paths`.
    pub floor: f64,
    /// Fitted slope of `ln P` against `ln ε`; `+∞` when no ε is resolvable
    /// (the probability vanishes below the floor everywhere it is not
    /// saturated).
    pub slope: f64,
    /// Number of ε values used in the fit.
    pub fitted_points: usize,
    pub vanishing: bool,
}

/// Largest probability admitted into the slope fit; above it the profile is
/// dominated by the bulk of the distribution, not its lower tail.
pub const SMALL_BALL_FIT_CAP: f64 = 0.5;

/// Builds a report from per-path `|V_T ξ|` values.
pub fn small_ball_from_norms(direction: &[f64], epsilons: &[f64], norms: &[f64]) -> SmallBallReport {
    let n = norms.len() as f64;
    let floor = 5.0 / n;
    let mut eps: Vec<f64> = epsilons.to_vec();
    eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut probs = Vec::new();
    let mut errs = Vec::new();
    let mut smooth = Vec::new();
    for &e in &eps {
        let p = norms.iter().filter(|v| **v < e).count() as f64 / n;
        probs.push(p);
        errs.push((p * (1.0 - p) / n).sqrt());
        smooth.push(norms.iter().map(|v| (-v / e).exp()).sum::<f64>() / n);
    }
    let fit: Vec<usize> = (0..eps.len())
        .filter(|&i| probs[i] > floor && probs[i] <= SMALL_BALL_FIT_CAP)
        .collect();
    let slope = match fit.len() {
        0 => f64::INFINITY,
        1 => {
            let i = fit[0];
            if i == 0 {
                f64::INFINITY
            } else {
                // P(ε_{i−1}) is below the floor: a lower bound on the slope.
                (probs[i].ln() - floor.ln()) / (eps[i].ln() - eps[i - 1].ln())
            }
        }
        k => {
            let xs: Vec<f64> = fit.iter().map(|&i| eps[i].ln()).collect();
            let ys: Vec<f64> = fit.iter().map(|&i| probs[i].ln()).collect();
            let mx = xs.iter().sum::<f64>() / k as f64;
            let my = ys.iter().sum::<f64>() / k as f64;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            sxy / sxx
        }
    };
    SmallBallReport {
        direction: direction.to_vec(),
        epsilons: eps,
        probabilities: probs,
        stderr: errs,
        smoothed: smooth,
        floor,
        slope,
        fitted_points: fit.len(),
        vanishing: fit.is_empty(),
    }
}

fn covariance_along(lay: &Layout, z: &[f64], xi: &[f64]) -> f64 {
    let d = lay.dim();
    let v = lay.get(z, Block::Covariance).expect("covariance");
    let mut out = vec![0.0; d];
    linalg::matvec(v, xi, &mut out, d);
    linalg::norm(&out)
}

/// `|V_T^{-1}|` (infinite when singular) and `|V_T ξ|` for each direction,
/// from one Malliavin ensemble; voided paths are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSamples {
    pub inverse_norms: Vec<f64>,
    pub along: Vec<Vec<f64>>,
}

pub fn covariance_samples(
    vfs: &Arc<VectorFieldSet>,
    directions: &[Vec<f64>],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<CovarianceSamples, McError> {
    let sys = build_augmentation(&AugmentationSpec::malliavin(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    let keep = |v: Vec<f64>| -> Vec<f64> { v.into_iter().filter(|v| !v.is_nan()).collect() };
    let inverse_norms = keep(ens.pathwise_functional(&[Block::Covariance], |lay, z| {
        component_norm(Component::VInverse, lay, z)
    })?);
    let along = directions
        .iter()
        .map(|xi| {
            Ok(keep(ens.pathwise_functional(&[Block::Covariance], |lay, z| {
                covariance_along(lay, z, xi)
            })?))
        })
        .collect::<Result<Vec<_>, McError>>()?;
    Ok(CovarianceSamples { inverse_norms, along })
}

/// Small-ball probabilities `P(|V_T ξ| < ε)` for several directions from one
/// Malliavin ensemble.
pub fn small_ball_many(
    vfs: &Arc<VectorFieldSet>,
    directions: &[Vec<f64>],
    epsilons: &[f64],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<Vec<SmallBallReport>, McError> {
    for xi in directions {
        if xi.len() != vfs.dim() || (linalg::norm(xi) - 1.0).abs() > 1e-9 {
            return Err(McError::Unsupported(format!(
                "direction {xi:?} is not a unit vector in R^{}",
                vfs.dim()
            )));
        }
    }
    let sys = build_augmentation(&AugmentationSpec::malliavin(vfs.clone()))?;
    let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
    directions
        .iter()
        .map(|xi| {
            let norms = ens.pathwise_functional(&[Block::Covariance], |lay, z| covariance_along(lay, z, xi))?;
            let norms: Vec<f64> = norms.into_iter().filter(|v| !v.is_nan()).collect();
            Ok(small_ball_from_norms(xi, epsilons, &norms))
        })
        .collect()
}

pub fn small_ball(
    vfs: &Arc<VectorFieldSet>,
    direction: &[f64],
    epsilons: &[f64],
    x: &[f64],
    t: f64,
    cfg: &McConfig,
) -> Result<SmallBallReport, McError> {
    Ok(small_ball_many(vfs, &[direction.to_vec()], epsilons, x, t, cfg)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    Kde,
    MalliavinWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub method: DensityMethod,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Kernel bandwidth (KDE only).
    pub bandwidth: Option<f64>,
    pub n_paths: usize,
}

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^{−1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let s = Stats::of(samples);
    let sd = s.stderr * n.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian-kernel density of `samples` on `ys`.
pub fn kde(samples: &[f64], ys: &[f64], bandwidth: f64) -> Vec<f64> {
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt() * samples.len() as f64);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Kernel mass beyond 9 bandwidths is below 1e-17 relative.
    let reach = 9.0 * bandwidth;
    use rayon::prelude::*;
    ys.par_iter()
        .map(|&y| {
            let lo = sorted.partition_point(|v| *v < y - reach);
            let hi = sorted.partition_point(|v| *v <= y + reach);
            let s: f64 = sorted[lo..hi]
                .iter()
                .map(|v| {
                    let z = (y - v) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum();
            s * norm
        })
        .collect()
}

/// Transition density `p_t(x, ·)` on `ys`.
///
/// `Kde` smooths terminal samples. `MalliavinWeight` moves the derivative of
/// the distribution function onto the Bismut weight,
/// `p_t(x, y) = E[1{x_T > y} u_T / (U_T V_T)]`; it is exact only when `U_T`
/// and `V_T` are path-independent, so it is restricted to one-dimensional
/// affine models with additive noise.
pub fn density_estimate(
    vfs: &Arc<VectorFieldSet>,
    x: &[f64],
    t: f64,
    ys: &[f64],
    method: DensityMethod,
    bandwidth: Option<f64>,
    cfg: &McConfig,
) -> Result<DensityEstimate, McError> {
    match method {
        DensityMethod::Kde => {
            if vfs.dim() != 1 {
                return Err(McError::Unsupported("KDE density is implemented for d = 1".into()));
            }
            let s = semigroup_samples(vfs, &TestFunction::coordinate(0), x, t, cfg)?;
            let s: Vec<f64> = s.into_iter().filter(|v| !v.is_nan()).collect();
            let bw = bandwidth.unwrap_or_else(|| silverman_bandwidth(&s));
            let values = kde(&s, ys, bw);
            Ok(DensityEstimate {
                method,
                ys: ys.to_vec(),
                values,
                stderr: vec![f64::NAN; ys.len()],
                bandwidth: Some(bw),
                n_paths: s.len(),
            })
        }
        DensityMethod::MalliavinWeight => {
            if vfs.dim() != 1 || vfs.affine_additive_coefficients().is_none() {
                return Err(McError::Unsupported(format!(
                    "Malliavin-weight density needs a one-dimensional affine model with additive noise; `{}` is not",
                    vfs.name()
                )));
            }
            let sys = build_augmentation(&AugmentationSpec::bismut(vfs.clone()))?;
            let ens = run_ensemble(&sys, &sys.initial_state(x)?, t, cfg)?;
            let pairs = ens.pathwise_vector(&[Block::Weight, Block::Covariance], 2, |lay, z, o| {
                let u = lay.get(z, Block::Jacobian).unwrap()[0];
                let v = lay.get(z, Block::Covariance).unwrap()[0];
                o[0] = lay.x(z)[0];
                o[1] = lay.get(z, Block::Weight).unwrap()[0] / (u * v);
            })?;
            let mut pts: Vec<(f64, f64)> = pairs
                .chunks(2)
                .filter(|c| !c[0].is_nan())
                .map(|c| (c[0], c[1]))
                .collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let n = pts.len() as f64;
            // The weight has mean zero, so p(y) is also −E[1{x_T ≤ y} w]; the
            // smaller of the two index sets gives the smaller variance.
            let mut p1 = vec![0.0; pts.len() + 1];
            let mut p2 = vec![0.0; pts.len() + 1];
            for (i, p) in pts.iter().enumerate() {
                p1[i + 1] = p1[i] + p.1;
                p2[i + 1] = p2[i] + p.1 * p.1;
            }
            let total = pts.len();
            let mut values = Vec::with_capacity(ys.len());
            let mut errs = Vec::with_capacity(ys.len());
            for &y in ys {
                let k = pts.partition_point(|p| p.0 <= y);
                let (sum, sq) = if k < total - k {
                    (-p1[k], p2[k])
                } else {
                    (p1[total] - p1[k], p2[total] - p2[k])
                };
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
                values.push(mean);
                errs.push((var / n).sqrt());
            }
            Ok(DensityEstimate {
                method,
                ys: ys.to_vec(),
                values,
                stderr: errs,
                bandwidth: None,
                n_paths: pts.len(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::catalog;

    fn cfg(n: usize) -> McConfig {
        McConfig::new(n, 64, 11)
    }

    #[test]
    fn semigroup_examples() {
        let bm = Arc::new(catalog::bm(1));
        let e = estimate_semigroup(&bm, &TestFunction::square(0), &[0.0], 1.0, &cfg(40_000)).unwrap();
        assert!((e.scalar() - 1.0).abs() < 3.0 * e.scalar_stderr());
        let one = estimate_semigroup(&bm, &TestFunction::constant(1.0), &[0.0], 1.0, &cfg(100)).unwrap();
        assert_eq!(one.value, vec![1.0]);
        assert_eq!(one.stderr, vec![0.0]);
    }

    #[test]
    fn unit_weight_reproduces_semigroup() {
        let ou = Arc::new(catalog::ou(1.0, 1.0));
        let f = TestFunction::bump(0, 0.2);
        let c = cfg(500);
        let spec = AugmentationSpec::girsanov(ou.clone(), PerturbationSchedule::constant(vec![0.5]));
        let w = weighted_samples(&spec, |_, _| 1.0, &f, &[0.3], 1.0, 1.0, &c).unwrap();
        let p = semigroup_samples(&ou, &f, &[0.3], 1.0, &c).unwrap();
        assert_eq!(w, p);
    }

    #[test]
    fn girsanov_shifted_mean() {
        let bm = Arc::new(catalog::bm(1));
        let c = 0.7;
        let spec = AugmentationSpec::girsanov(bm, PerturbationSchedule::constant(vec![c]));
        let e = estimate_weighted(
            &spec,
            weight_u,
            &TestFunction::coordinate(0),
            &[0.0],
            1.0,
            1.0,
            &cfg(40_000),
        )
        .unwrap();
        assert!((e.scalar() - c).abs() < 3.0 * e.scalar_stderr(), "{e:?}");
    }

    #[test]
    fn gradient_examples() {
        let ou = Arc::new(catalog::ou(1.0, 1.0));
        let g = estimate_gradient(
            &ou,
            &TestFunction::coordinate(0),
            &[0.4],
            1.0,
            &McConfig::new(16, 256, 1),
        )
        .unwrap();
        assert!((g.scalar() - (-1.0f64).exp()).abs() < 10.0 / 256.0);
        assert!(g.scalar_stderr() < 1e-12);
        let c = estimate_gradient(&ou, &TestFunction::constant(2.0), &[0.4], 1.0, &cfg(16)).unwrap();
        assert_eq!((c.scalar(), c.scalar_stderr()), (0.0, 0.0));
    }

    #[test]
    fn bismut_on_bm() {
        let bm = Arc::new(catalog::bm(1));
        let pair = bismut_pair(&bm, &TestFunction::coordinate(0), &[0.0], 1.0, &cfg(40_000)).unwrap();
        assert!((pair.lhs.scalar() - 1.0).abs() < 1e-12);
        assert!(pair.difference.scalar().abs() < 3.0 * pair.difference.scalar_stderr());
    }

    #[test]
    fn moments_of_deterministic_components() {
        let bm = Arc::new(catalog::bm(1));
        let r = estimate_moments(&bm, Component::VInverse, &[0.0, 2.0], &[0.0], 1.0, &cfg(64)).unwrap();
        assert_eq!(r.moments[0], 1.0);
        assert!((r.moments[1] - 1.0).abs() < 1e-12);
        assert_eq!(r.singular, 0);
        let plane = Arc::new(catalog::degenerate_plane());
        assert!(matches!(
            estimate_moments(&plane, Component::VInverse, &[1.0], &[0.0, 0.0], 1.0, &cfg(64)),
            Err(McError::Singular { .. })
        ));
    }

    #[test]
    fn small_ball_fit() {
        // P(|Z| < ε) = ε for uniform samples: slope 1.
        let norms: Vec<f64> = (0..100_000).map(|i| (i as f64 + 0.5) / 100_000.0).collect();
        let r = small_ball_from_norms(&[1.0], &[0.01, 0.02, 0.05, 0.1, 0.2, 0.4], &norms);
        assert!((r.slope - 1.0).abs() < 1e-3, "{}", r.slope);
        assert_eq!(r.fitted_points, 6);
        let constant = vec![1.0; 1000];
        let r = small_ball_from_norms(&[1.0], &[0.1, 0.5, 0.9], &constant);
        assert!(r.vanishing && r.slope.is_infinite());
        assert!(r.probabilities.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn density_methods_and_rejection() {
        let gbm = Arc::new(catalog::gbm(0.0, 0.5));
        assert!(matches!(
            density_estimate(
                &gbm,
                &[1.0],
                1.0,
                &[1.0],
                DensityMethod::MalliavinWeight,
                None,
                &cfg(10)
            ),
            Err(McError::Unsupported(_))
        ));
        let bm = Arc::new(catalog::bm(1));
        let ys = [0.0, 40.0];
        let c = McConfig::new(100_000, 1, 5);
        for method in [DensityMethod::Kde, DensityMethod::MalliavinWeight] {
            let d = density_estimate(&bm, &[0.0], 1.0, &ys, method, None, &c).unwrap();
            assert!((d.values[0] - 0.398_942_28).abs() < 0.01, "{method:?} {:?}", d.values);
            assert_eq!(d.values[1], 0.0);
        }
    }

    #[test]
    fn csv_rows() {
        let e = SemigroupEstimate {
            descriptor: "P_t[x]".into(),
            model: "bm".into(),
            t: 1.0,
            x: vec![0.0, 1.0],
            value: vec![0.5],
            stderr: vec![0.1],
            n_paths: 10,
            seed: 3,
        };
        let mut buf = Vec::new();
        write_estimates_csv(&mut buf, &[e]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "descriptor,model,t,x,value,stderr,n_paths,seed\nP_t[x],bm,1,0;1,0.5,0.1,10,3\n"
        );
    }
}

//! Named pass/fail experiments assembled from the Monte Carlo estimators and
//! the grid oracle.
//!
//! Every comparison is a [`Channel`]: two numbers, a statistical standard
//! error `σ` and a deterministic error budget. A channel passes iff
//! `|lhs − rhs| ≤ 3σ + budget`; it is inconclusive when it passes only
//! because `3σ` exceeds the size of the effect, `max(|lhs|, |rhs|, 0.05)`.
//! A report's verdict is the worst of its channels.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{experiment_seed, parse_schedule, ExperimentConfig, ExperimentKind, RunConfig};
use crate::field_model::{
    direction_net, AugmentationSpec, ModelError, PerturbationSchedule, Support, TestFunction, VectorFieldSet,
};
use crate::mc_semigroup::{
    bismut_samples_many, covariance_samples, density_estimate, gradient_samples_many, moments_from_norms,
    perturbed_samples_many, semigroup_samples_many, small_ball_from_norms, weighted_samples_many, Component,
    DensityMethod, McConfig, McError, Stats,
};
use crate::pde_oracle::{
    default_axis, gauss_legendre, solve_parabolic, solve_parabolic_with_budget, Axis, Coefficients, GridSolution,
    PdeError,
};
use crate::sde_engine::{with_threads, SimError};

/// Below this scale an effect is too small to call inconclusive.
pub const EFFECT_FLOOR: f64 = 0.05;

/// Relative rounding allowance of a central difference with step `Δ`.
const FD_ROUNDING: f64 = 1e-9;

/// Relative rounding allowance of a grid solve.
const GRID_ROUNDING: f64 = 1e-10;

fn grid_rounding(v: f64) -> f64 {
    GRID_ROUNDING * (1.0 + v.abs())
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Unsupported(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Fail,
}

impl Verdict {
    pub fn compare(lhs: f64, rhs: f64, sigma: f64, budget: f64) -> Self {
        let diff = (lhs - rhs).abs();
        // NaN anywhere fails.
        if !(diff <= 3.0 * sigma + budget) {
            return Verdict::Fail;
        }
        if 3.0 * sigma > lhs.abs().max(rhs.abs()).max(EFFECT_FLOOR) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    }

    pub fn worst(self, other: Self) -> Self {
        self.max(other)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Inconclusive => "inconclusive",
            Verdict::Fail => "fail",
        }
    }
}

/// One side-by-side comparison inside a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Channel {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub sigma: f64,
    pub budget: f64,
    pub verdict: Verdict,
}

impl Channel {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, sigma: f64, budget: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            sigma,
            budget,
            verdict: Verdict::compare(lhs, rhs, sigma, budget),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    /// `<experiment name>/<cell>`.
    pub experiment: String,
    pub kind: ExperimentKind,
    pub model: String,
    pub params: Value,
    pub lhs: f64,
    pub rhs: f64,
    pub sigma: f64,
    pub budget: f64,
    pub verdict: Verdict,
    pub seed: u64,
    /// Wall time of the check that produced this cell; cells of one check
    /// share ensembles and therefore share the figure. The only field of a
    /// report that differs between identical runs.
    pub runtime_ms: u64,
    pub details: Value,
}

impl ExperimentReport {
    fn from_channels(
        setup: &CheckSetup,
        kind: ExperimentKind,
        cell: &str,
        params: Value,
        channels: Vec<Channel>,
        mut details: Value,
    ) -> Self {
        let verdict = channels.iter().fold(Verdict::Pass, |v, c| v.worst(c.verdict));
        let primary = &channels[0];
        details["channels"] = serde_json::to_value(&channels).expect("channels serialize");
        Self {
            experiment: join_cell(&setup.name, cell),
            kind,
            model: setup.model_label(),
            params,
            lhs: primary.lhs,
            rhs: primary.rhs,
            sigma: primary.sigma,
            budget: primary.budget,
            verdict,
            seed: setup.mc.seed,
            runtime_ms: 0,
            details,
        }
    }

    /// A failed report for a check that could not run.
    pub fn errored(name: &str, kind: ExperimentKind, model: &str, seed: u64, error: &str) -> Self {
        Self {
            experiment: name.to_string(),
            kind,
            model: model.to_string(),
            params: json!({}),
            lhs: f64::NAN,
            rhs: f64::NAN,
            sigma: f64::NAN,
            budget: f64::NAN,
            verdict: Verdict::Fail,
            seed,
            runtime_ms: 0,
            details: json!({ "error": error }),
        }
    }

    pub fn summary_line(&self) -> String {
        let verdict = self.verdict.as_str().to_uppercase();
        match self.details.get("error") {
            Some(e) => format!("{verdict:<12} {}  error: {}", self.experiment, e.as_str().unwrap_or("")),
            None => format!(
                "{verdict:<12} {}  lhs={:.6} rhs={:.6} sigma={:.2e} budget={:.2e}",
                self.experiment, self.lhs, self.rhs, self.sigma, self.budget
            ),
        }
    }
}

fn join_cell(name: &str, cell: &str) -> String {
    if cell.is_empty() {
        name.to_string()
    } else {
        format!("{name}/{cell}")
    }
}

/// Grid resolution of the oracle channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PdeResolution {
    pub nodes: usize,
    pub time_steps: usize,
}

impl Default for PdeResolution {
    fn default() -> Self {
        Self {
            nodes: 401,
            time_steps: 200,
        }
    }
}

/// Everything a check needs besides its kind-specific parameters.
#[derive(Clone)]
pub struct CheckSetup {
    pub name: String,
    pub model: Arc<VectorFieldSet>,
    /// Model substituted on the right-hand side; a mismatch is a negative control.
    pub control: Option<Arc<VectorFieldSet>>,
    pub x: Vec<f64>,
    pub t: f64,
    pub mc: McConfig,
    /// `None` disables the grid-oracle channels.
    pub pde: Option<PdeResolution>,
}

impl CheckSetup {
    pub fn new(name: impl Into<String>, model: VectorFieldSet, x: Vec<f64>, t: f64, mc: McConfig) -> Self {
        Self {
            name: name.into(),
            model: Arc::new(model),
            control: None,
            x,
            t,
            mc,
            pde: Some(PdeResolution::default()),
        }
    }

    pub fn with_control(mut self, control: VectorFieldSet) -> Self {
        self.control = Some(Arc::new(control));
        self
    }

    pub fn with_pde(mut self, pde: Option<PdeResolution>) -> Self {
        self.pde = pde;
        self
    }

    fn rhs_model(&self) -> &Arc<VectorFieldSet> {
        self.control.as_ref().unwrap_or(&self.model)
    }

    fn model_label(&self) -> String {
        match &self.control {
            Some(c) => format!("{} (control: {})", self.model.name(), c.name()),
            None => self.model.name().to_string(),
        }
    }

    fn params(&self, extra: Value) -> Value {
        let mut p = json!({
            "t": self.t,
            "x": self.x,
            "n_paths": self.mc.n_paths,
            "n_steps": self.mc.n_steps,
        });
        if let Value::Object(m) = extra {
            for (k, v) in m {
                p[k] = v;
            }
        }
        p
    }

    fn oracle(&self) -> Option<PdeResolution> {
        if self.model.dim() == 1 {
            self.pde
        } else {
            None
        }
    }
}

/// Default start: the origin, or `1` on the positive half-line.
pub fn default_start(model: &VectorFieldSet) -> Vec<f64> {
    match model.support() {
        Support::PositiveHalfLine => vec![1.0; model.dim()],
        Support::Whole => vec![0.0; model.dim()],
    }
}

fn means(samples: &[Vec<f64>]) -> Vec<f64> {
    samples.iter().map(|s| Stats::of(s).mean).collect()
}

fn column(samples: &[f64], d: usize, j: usize) -> Vec<f64> {
    samples.iter().skip(j).step_by(d).copied().collect()
}

fn cell_suffix(d: usize, j: usize) -> String {
    if d == 1 {
        String::new()
    } else {
        format!("/e{j}")
    }
}

fn finish(mut reports: Vec<ExperimentReport>, start: Instant) -> Vec<ExperimentReport> {
    let ms = start.elapsed().as_millis() as u64;
    for r in &mut reports {
        r.runtime_ms = ms;
    }
    reports
}

/// Perturbed-drift semigroup against the Girsanov-weighted semigroup started
/// at `u = 1`, one report per test function. Both sides use common noise,
/// so `σ` is the stderr of the pathwise difference. In `d = 1` a second
/// channel compares the grid solution of the perturbed equation with the
/// weighted estimate, within `3σ + |v_h − v_{h/2}| + 2|m_N − m_{N/2}|`.
pub fn check_quasi_invariance(
    setup: &CheckSetup,
    h: &PerturbationSchedule,
    fs: &[TestFunction],
) -> Result<Vec<ExperimentReport>, SuiteError> {
    let start = Instant::now();
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let lhs = perturbed_samples_many(&setup.model, h, fs, x, t, mc)?;
    let spec = AugmentationSpec::girsanov(setup.rhs_model().clone(), h.clone());
    let rhs = weighted_samples_many(&spec, fs, x, 1.0, t, mc)?;

    let oracle = match setup.oracle() {
        Some(res) => {
            let coarse = match mc.coarsened() {
                Some(c) => Some(means(&weighted_samples_many(&spec, fs, x, 1.0, t, &c)?)),
                None => None,
            };
            let coeffs = Coefficients::perturbed(setup.model.clone(), h.clone());
            let axis = default_axis(&setup.model, x[0], t, res.nodes)?;
            let grids = fs
                .iter()
                .map(|f| solve_parabolic_with_budget(&coeffs, &|p| f.eval(p), &[axis], t, res.time_steps))
                .collect::<Result<Vec<_>, _>>()?;
            Some((grids, coarse))
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(fs.len());
    for (k, f) in fs.iter().enumerate() {
        let (l, r) = (Stats::of(&lhs[k]), Stats::of(&rhs[k]));
        let paired = Stats::paired(&lhs[k], &rhs[k]);
        let mut channels = vec![Channel::new(
            "perturbed_vs_weighted",
            l.mean,
            r.mean,
            paired.stderr,
            0.0,
        )];
        let mut details = json!({ "lhs_stderr": l.stderr, "rhs_stderr": r.stderr });
        if let Some((grids, coarse)) = &oracle {
            let g = &grids[k];
            let grid_budget = g.budget_at(x)? + grid_rounding(r.mean);
            let disc = coarse.as_ref().map_or(0.0, |c| 2.0 * (r.mean - c[k]).abs());
            channels.push(Channel::new(
                "grid_vs_weighted",
                g.interpolate(x)?,
                r.mean,
                r.stderr,
                grid_budget + disc,
            ));
            details["grid_budget"] = json!(grid_budget);
            details["discretization_budget"] = json!(disc);
        }
        let params = setup.params(json!({ "h": h.label(), "f": f.name() }));
        let cell = format!("h={}/f={}", h.label(), f.name());
        reports.push(ExperimentReport::from_channels(
            setup,
            ExperimentKind::QuasiInvariance,
            &cell,
            params,
            channels,
            details,
        ));
    }
    Ok(finish(reports, start))
}

/// `∫_0^t P_s[Σ_i h_s^i X_i ∂_x P_{t−s} f](x) ds` by Gauss–Legendre in `s`,
/// each nested semigroup taken from a grid solve on `axis`.
#[allow(clippy::too_many_arguments)]
pub fn ibp_quadrature(
    vfs: &Arc<VectorFieldSet>,
    h: &PerturbationSchedule,
    f: &TestFunction,
    x0: f64,
    t: f64,
    nodes: usize,
    axis: &Axis,
    time_steps: usize,
) -> Result<f64, SuiteError> {
    if vfs.dim() != 1 {
        return Err(SuiteError::Unsupported("the quadrature side needs d = 1".into()));
    }
    let coeffs = Coefficients::from_model(vfs.clone());
    let steps_for = |dur: f64| ((time_steps as f64 * dur / t).ceil() as usize).max(4);
    let m = vfs.num_noise();
    let hx = axis.spacing();
    let mut total = 0.0;
    let mut hs = vec![0.0; m];
    let mut v = [0.0];
    for (s, w) in gauss_legendre(nodes, 0.0, t) {
        let inner = solve_parabolic(
            &coeffs,
            &|p| f.eval(p),
            std::slice::from_ref(axis),
            t - s,
            steps_for(t - s),
        )?;
        let n = axis.nodes;
        let vals = &inner.values;
        h.eval_into(s, &mut hs);
        let g: Vec<f64> = (0..n)
            .map(|i| {
                let dv = if i == 0 {
                    (vals[1] - vals[0]) / hx
                } else if i == n - 1 {
                    (vals[n - 1] - vals[n - 2]) / hx
                } else {
                    (vals[i + 1] - vals[i - 1]) / (2.0 * hx)
                };
                let y = axis.coord(i);
                let mut acc = 0.0;
                for (k, hk) in hs.iter().enumerate() {
                    vfs.field(k + 1).eval(&[y], &mut v);
                    acc += hk * v[0];
                }
                acc * dv
            })
            .collect();
        let data = GridSolution {
            axes: vec![*axis],
            values: g,
            t: 0.0,
            time_steps: 0,
            boundary: "",
            coarse: None,
        };
        let outer = solve_parabolic(
            &coeffs,
            &|p| data.interpolate(p).unwrap_or(0.0),
            std::slice::from_ref(axis),
            s,
            steps_for(s),
        )?;
        total += w * outer.interpolate(&[x0])?;
    }
    Ok(total)
}

/// Quadrature of nested grid semigroups against the integration-by-parts
/// weighted estimate started at `u = 0`. The budget is
/// `|Q_n − Q_{2n}| + |Q_n(grid) − Q_n(refined grid)| + 2|m_N − m_{N/2}|`.
pub fn check_elementary_ibp(
    setup: &CheckSetup,
    h: &PerturbationSchedule,
    fs: &[TestFunction],
    quadrature_nodes: usize,
) -> Result<Vec<ExperimentReport>, SuiteError> {
    let start = Instant::now();
    if setup.model.dim() != 1 {
        return Err(SuiteError::Unsupported(format!(
            "elementary integration by parts needs d = 1; `{}` has d = {}",
            setup.model.name(),
            setup.model.dim()
        )));
    }
    if quadrature_nodes < 16 {
        return Err(SuiteError::Unsupported("quadrature needs at least 16 nodes".into()));
    }
    let res = setup.pde.unwrap_or_default();
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let spec = AugmentationSpec::ibp(setup.rhs_model().clone(), h.clone());
    let rhs = weighted_samples_many(&spec, fs, x, 0.0, t, mc)?;
    let coarse = match mc.coarsened() {
        Some(c) => Some(means(&weighted_samples_many(&spec, fs, x, 0.0, t, &c)?)),
        None => None,
    };
    let axis = default_axis(&setup.model, x[0], t, res.nodes)?;
    let fine_axis = axis.refined();

    let mut reports = Vec::with_capacity(fs.len());
    for (k, f) in fs.iter().enumerate() {
        let q = |n: usize, a: &Axis, steps: usize| ibp_quadrature(&setup.model, h, f, x[0], t, n, a, steps);
        let base = q(quadrature_nodes, &axis, res.time_steps)?;
        let doubled = q(2 * quadrature_nodes, &axis, res.time_steps)?;
        let fine = q(quadrature_nodes, &fine_axis, 2 * res.time_steps)?;
        let quad_bound = (doubled - base).abs();
        let grid_bound = (fine - base).abs() + grid_rounding(fine);
        let r = Stats::of(&rhs[k]);
        let disc = coarse.as_ref().map_or(0.0, |c| 2.0 * (r.mean - c[k]).abs());
        let channels = vec![Channel::new(
            "quadrature_vs_weighted",
            fine,
            r.mean,
            r.stderr,
            quad_bound + grid_bound + disc,
        )];
        let details = json!({
            "quadrature_nodes": quadrature_nodes,
            "quadrature_bound": quad_bound,
            "grid_budget": grid_bound,
            "discretization_budget": disc,
        });
        let params = setup.params(json!({ "h": h.label(), "f": f.name() }));
        let cell = format!("h={}/f={}", h.label(), f.name());
        reports.push(ExperimentReport::from_channels(
            setup,
            ExperimentKind::ElementaryIbp,
            &cell,
            params,
            channels,
            details,
        ));
    }
    Ok(finish(reports, start))
}

/// `E[Df(x_T) U_T]` against central differences of `P_t f` with step `Δ`
/// on common noise. The budget `|FD(2Δ) − FD(Δ)|` covers the `O(Δ²)` term.
/// In `d = 1` the gradient of the grid solution is a second channel.
pub fn check_gradient_transfer(
    setup: &CheckSetup,
    fs: &[TestFunction],
    delta: f64,
) -> Result<Vec<ExperimentReport>, SuiteError> {
    let start = Instant::now();
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let d = setup.model.dim();
    let lhs = gradient_samples_many(&setup.model, fs, x, t, mc)?;
    let shifted = |j: usize, s: f64| -> Result<Vec<Vec<f64>>, SuiteError> {
        let mut y = x.clone();
        y[j] += s;
        Ok(semigroup_samples_many(setup.rhs_model(), fs, &y, t, mc)?)
    };
    let oracle = match setup.oracle() {
        Some(res) => {
            let coarse = match mc.coarsened() {
                Some(c) => Some(means(&gradient_samples_many(&setup.model, fs, x, t, &c)?)),
                None => None,
            };
            let coeffs = Coefficients::from_model(setup.model.clone());
            let axis = default_axis(&setup.model, x[0], t, res.nodes)?;
            let grids = fs
                .iter()
                .map(|f| solve_parabolic_with_budget(&coeffs, &|p| f.eval(p), &[axis], t, res.time_steps))
                .collect::<Result<Vec<_>, _>>()?;
            Some((grids, coarse))
        }
        None => None,
    };

    let mut reports = Vec::new();
    for j in 0..d {
        let (p1, m1) = (shifted(j, delta)?, shifted(j, -delta)?);
        let (p2, m2) = (shifted(j, 2.0 * delta)?, shifted(j, -2.0 * delta)?);
        for (k, f) in fs.iter().enumerate() {
            let fd = |p: &[f64], m: &[f64], step: f64| -> Vec<f64> {
                p.iter().zip(m).map(|(a, b)| (a - b) / (2.0 * step)).collect()
            };
            let fd1 = fd(&p1[k], &m1[k], delta);
            let fd2 = fd(&p2[k], &m2[k], 2.0 * delta);
            let l = column(&lhs[k], d, j);
            let ls = Stats::of(&l);
            let (r1, r2) = (Stats::of(&fd1), Stats::of(&fd2));
            let paired = Stats::paired(&l, &fd1);
            let fd_budget = (r2.mean - r1.mean).abs() + FD_ROUNDING * (1.0 + r1.mean.abs());
            let mut channels = vec![Channel::new(
                "jacobian_vs_fd",
                ls.mean,
                r1.mean,
                paired.stderr,
                fd_budget,
            )];
            let mut details = json!({
                "delta": delta,
                "fd_budget": fd_budget,
                "lhs_stderr": ls.stderr,
                "rhs_stderr": r1.stderr,
            });
            if let Some((grids, coarse)) = &oracle {
                let g = &grids[k];
                let gg = g.gradient(x)?[0];
                let gc = g.coarse.as_ref().map_or(Ok(gg), |c| c.gradient(x).map(|v| v[0]))?;
                let disc = coarse.as_ref().map_or(0.0, |c| 2.0 * (ls.mean - c[k]).abs());
                channels.push(Channel::new(
                    "grid_gradient_vs_jacobian",
                    gg,
                    ls.mean,
                    ls.stderr,
                    (gg - gc).abs() + grid_rounding(gg) + disc,
                ));
                details["grid_budget"] = json!((gg - gc).abs() + grid_rounding(gg));
                details["discretization_budget"] = json!(disc);
            }
            let params = setup.params(json!({ "f": f.name(), "component": j }));
            let cell = format!("f={}{}", f.name(), cell_suffix(d, j));
            reports.push(ExperimentReport::from_channels(
                setup,
                ExperimentKind::GradientTransfer,
                &cell,
                params,
                channels,
                details,
            ));
        }
    }
    Ok(finish(reports, start))
}

/// `E[Df(x_T) U_T V_T]` against `E[f(x_T) u_T]` on one feedback-lift
/// ensemble; `σ` is the stderr of the pathwise difference and the budget is
/// `2|Δ_N − Δ_{N/2}|` for the difference `Δ` on a coupled half-step run.
pub fn check_bismut(setup: &CheckSetup, fs: &[TestFunction]) -> Result<Vec<ExperimentReport>, SuiteError> {
    let start = Instant::now();
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let d = setup.model.dim();
    let run = |cfg: &McConfig| -> Result<Vec<(Vec<f64>, Vec<f64>)>, SuiteError> {
        let mut pairs = bismut_samples_many(&setup.model, fs, x, t, cfg)?;
        if let Some(c) = &setup.control {
            let other = bismut_samples_many(c, fs, x, t, cfg)?;
            for (p, o) in pairs.iter_mut().zip(other) {
                p.1 = o.1;
            }
        }
        Ok(pairs)
    };
    let pairs = run(mc)?;
    let coarse = match mc.coarsened() {
        Some(c) => Some(run(&c)?),
        None => None,
    };

    let mut reports = Vec::new();
    for j in 0..d {
        for (k, f) in fs.iter().enumerate() {
            let (l, r) = (column(&pairs[k].0, d, j), column(&pairs[k].1, d, j));
            let diff = Stats::paired(&r, &l);
            let disc = coarse.as_ref().map_or(0.0, |c| {
                let cd = Stats::paired(&column(&c[k].1, d, j), &column(&c[k].0, d, j));
                2.0 * (diff.mean - cd.mean).abs()
            });
            let (ls, rs) = (Stats::of(&l), Stats::of(&r));
            let channels = vec![Channel::new("paired_difference", ls.mean, rs.mean, diff.stderr, disc)];
            let details = json!({
                "difference": diff.mean,
                "lhs_stderr": ls.stderr,
                "rhs_stderr": rs.stderr,
                "discretization_budget": disc,
            });
            let params = setup.params(json!({ "f": f.name(), "component": j }));
            let cell = format!("f={}{}", f.name(), cell_suffix(d, j));
            reports.push(ExperimentReport::from_channels(
                setup,
                ExperimentKind::Bismut,
                &cell,
                params,
                channels,
                details,
            ));
        }
    }
    Ok(finish(reports, start))
}

/// Exact `E|V_t^{-1}|^p` for one-dimensional affine models with additive
/// noise, where `V_t = Σσ_i² ∫_0^t e^{−2βs} ds` is deterministic.
pub fn closed_form_inverse_moments(model: &VectorFieldSet, t: f64, exponents: &[f64]) -> Option<Vec<f64>> {
    if model.dim() != 1 {
        return None;
    }
    let aff = model.affine_additive_coefficients()?;
    let beta = aff.linear[0];
    let s2: f64 = aff.noise.iter().map(|s| s[0] * s[0]).sum();
    let v = if beta.abs() < 1e-12 {
        s2 * t
    } else {
        s2 * (1.0 - (-2.0 * beta * t).exp()) / (2.0 * beta)
    };
    Some(exponents.iter().map(|p| v.powf(-p)).collect())
}

/// Nondegeneracy of the Malliavin covariance. Passes iff at most 1% of paths
/// have a singular `V`, the `V^{-1}` moments change by less than 10% between
/// half and full sample, the fitted small-ball slope of `|V ξ|` is at least
/// `max exponent + d` in every direction of the net (a finite stand-in for
/// super-polynomial decay), and, when `V` is known in closed form, the
/// moments match it within `3σ + 2|m_N − m_{N/2}|`.
pub fn check_nondegeneracy(
    setup: &CheckSetup,
    exponents: &[f64],
    epsilons: Option<&[f64]>,
    n_directions: usize,
) -> Result<ExperimentReport, SuiteError> {
    let start = Instant::now();
    let subject = setup.rhs_model();
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let d = subject.dim();
    let dirs = direction_net(d, n_directions);
    let samples = covariance_samples(subject, &dirs, x, t, mc)?;
    let n = samples.inverse_norms.len();
    let singular = samples.inverse_norms.iter().filter(|v| v.is_infinite()).count();
    let singular_fraction = singular as f64 / n.max(1) as f64;
    let moments = moments_from_norms(Component::VInverse, &samples.inverse_norms, exponents).ok();
    let doubling = moments.as_ref().map_or(f64::INFINITY, |m| m.doubling_change());

    let eps: Vec<f64> = match epsilons {
        Some(e) => e.to_vec(),
        None => {
            let mut s: Vec<f64> = samples.along[0].iter().copied().filter(|v| v.is_finite()).collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = s.get(s.len() / 2).copied().unwrap_or(1.0).max(1e-300);
            (0..=12).map(|k| med * 0.5f64.powi(k)).collect()
        }
    };
    let balls: Vec<_> = dirs
        .iter()
        .zip(&samples.along)
        .map(|(xi, norms)| small_ball_from_norms(xi, &eps, norms))
        .collect();
    let min_slope = balls.iter().map(|b| b.slope).fold(f64::INFINITY, f64::min);
    let required = exponents.iter().copied().fold(0.0, f64::max) + d as f64;

    let mut closed_ok = true;
    let mut closed_json = Value::Null;
    if let (Some(exact), Some(m)) = (closed_form_inverse_moments(&setup.model, t, exponents), &moments) {
        let coarse = match mc.coarsened() {
            Some(c) => {
                let cs = covariance_samples(subject, &[], x, t, &c)?;
                moments_from_norms(Component::VInverse, &cs.inverse_norms, exponents)
                    .ok()
                    .map(|r| r.moments)
            }
            None => None,
        };
        let mut rows = Vec::new();
        for (i, p) in exponents.iter().enumerate() {
            let disc = coarse.as_ref().map_or(0.0, |c| 2.0 * (m.moments[i] - c[i]).abs());
            let rounding = 1e-10 * exact[i].abs();
            let c = Channel::new(format!("p={p}"), m.moments[i], exact[i], m.stderr[i], disc + rounding);
            closed_ok &= c.verdict != Verdict::Fail;
            rows.push(c);
        }
        closed_json = serde_json::to_value(rows).expect("channels serialize");
    }

    let pass = singular_fraction <= 0.01 && doubling < 0.1 && min_slope >= required && closed_ok;
    let details = json!({
        "singular_paths": singular,
        "singular_fraction": singular_fraction,
        "doubling_change": finite_or_str(doubling),
        "moments": moments,
        "closed_form": closed_json,
        "epsilons": eps,
        "min_slope": finite_or_str(min_slope),
        "required_slope": required,
        "vanishing_directions": balls.iter().filter(|b| b.vanishing).count(),
        "slopes": balls.iter().map(|b| finite_or_str(b.slope)).collect::<Vec<_>>(),
        "slope_rule": "fitted log-log slope as a finite stand-in for super-polynomial decay",
    });
    let mut report = ExperimentReport {
        experiment: setup.name.clone(),
        kind: ExperimentKind::Nondegeneracy,
        model: setup.model_label(),
        params: setup.params(json!({ "exponents": exponents, "directions": dirs.len() })),
        lhs: min_slope,
        rhs: required,
        sigma: 0.0,
        budget: 0.0,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        seed: mc.seed,
        runtime_ms: 0,
        details,
    };
    report.runtime_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}

fn finite_or_str(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

/// `y`-grid of `points` values over `mean ± sigmas · sd` of the exact marginal.
pub fn default_density_grid(model: &VectorFieldSet, x0: f64, t: f64, points: usize, sigmas: f64) -> Option<Vec<f64>> {
    let aff = model.affine_additive_coefficients()?;
    let (mean, var) = aff.gaussian_marginal_1d(x0, t);
    let sd = var.sqrt();
    let n = points.max(2);
    Some(
        (0..n)
            .map(|i| mean - sigmas * sd + 2.0 * sigmas * sd * i as f64 / (n - 1) as f64)
            .collect(),
    )
}

/// Malliavin-weight and kernel density estimates against the exact Gaussian
/// marginal; passes iff both sup-norm errors on `ys` are below their
/// tolerances. `lhs` and `rhs` carry the two sup errors.
pub fn check_density(
    setup: &CheckSetup,
    ys: &[f64],
    weight_tolerance: f64,
    kde_tolerance: f64,
) -> Result<ExperimentReport, SuiteError> {
    let start = Instant::now();
    let model = &setup.model;
    let aff = match (model.dim(), model.affine_additive_coefficients()) {
        (1, Some(a)) => a,
        _ => {
            return Err(SuiteError::Unsupported(format!(
                "the density check needs a one-dimensional affine model with additive noise; `{}` is not",
                model.name()
            )))
        }
    };
    let (x, t, mc) = (&setup.x, setup.t, &setup.mc);
    let (mean, var) = aff.gaussian_marginal_1d(x[0], t);
    let exact: Vec<f64> = ys
        .iter()
        .map(|y| (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
        .collect();
    let subject = setup.rhs_model();
    let mw = density_estimate(subject, x, t, ys, DensityMethod::MalliavinWeight, None, mc)?;
    let kde = density_estimate(subject, x, t, ys, DensityMethod::Kde, None, mc)?;
    let sup = |v: &[f64]| {
        v.iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m: f64, e| if e.is_nan() { f64::NAN } else { m.max(e) })
    };
    let (mw_err, kde_err) = (sup(&mw.values), sup(&kde.values));
    let sigma = mw.stderr.iter().copied().fold(0.0, f64::max);
    let pass = mw_err < weight_tolerance && kde_err < kde_tolerance;
    let details = json!({
        "ys": ys,
        "exact": exact,
        "malliavin_weight": mw.values,
        "malliavin_weight_stderr": mw.stderr,
        "kde": kde.values,
        "bandwidth": kde.bandwidth,
        "weight_tolerance": weight_tolerance,
        "kde_tolerance": kde_tolerance,
        "lhs": "sup error of the Malliavin-weight estimate",
        "rhs": "sup error of the kernel estimate",
    });
    Ok(ExperimentReport {
        experiment: setup.name.clone(),
        kind: ExperimentKind::Density,
        model: setup.model_label(),
        params: setup.params(json!({ "y_min": ys.first(), "y_max": ys.last(), "y_points": ys.len() })),
        lhs: mw_err,
        rhs: kde_err,
        sigma,
        budget: weight_tolerance,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        seed: mc.seed,
        runtime_ms: start.elapsed().as_millis() as u64,
        details,
    })
}

/// Resolves one configured experiment into a [`CheckSetup`].
pub fn setup_for(config: &RunConfig, e: &ExperimentConfig) -> Result<CheckSetup, SuiteError> {
    let model_cfg = e.model.as_ref().unwrap_or(&config.model);
    let model = model_cfg.build()?;
    let x =
        e.x.clone()
            .or_else(|| config.x.clone())
            .unwrap_or_else(|| default_start(&model));
    let seed = e.seed.unwrap_or_else(|| experiment_seed(config.seed, &e.name));
    let mc = McConfig::new(
        e.n_paths.unwrap_or(config.n_paths),
        e.n_steps.unwrap_or(config.n_steps),
        seed,
    );
    let mut setup = CheckSetup::new(e.name.clone(), model, x, e.t.unwrap_or(config.t), mc);
    if let Some(c) = &e.control_model {
        setup = setup.with_control(c.build()?);
    }
    let res = PdeResolution {
        nodes: e.pde_nodes,
        time_steps: e.pde_steps,
    };
    Ok(setup.with_pde(e.pde.then_some(res)))
}

fn dispatch(config: &RunConfig, e: &ExperimentConfig) -> Result<Vec<ExperimentReport>, SuiteError> {
    let setup = setup_for(config, e)?;
    let m = setup.model.num_noise();
    let fs =
        e.f.iter()
            .map(|name| {
                TestFunction::dictionary(name, 0, e.bump_center)
                    .ok_or_else(|| SuiteError::Config(format!("unknown test function `{name}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
    let schedules =
        e.h.iter()
            .map(|s| parse_schedule(s, m).map_err(SuiteError::Config))
            .collect::<Result<Vec<_>, _>>()?;
    Ok(match e.kind {
        ExperimentKind::QuasiInvariance => {
            let mut out = Vec::new();
            for h in &schedules {
                out.extend(check_quasi_invariance(&setup, h, &fs)?);
            }
            out
        }
        ExperimentKind::ElementaryIbp => {
            let mut out = Vec::new();
            for h in &schedules {
                out.extend(check_elementary_ibp(&setup, h, &fs, e.quadrature_nodes)?);
            }
            out
        }
        ExperimentKind::GradientTransfer => check_gradient_transfer(&setup, &fs, e.delta)?,
        ExperimentKind::Bismut => check_bismut(&setup, &fs)?,
        ExperimentKind::Nondegeneracy => vec![check_nondegeneracy(
            &setup,
            &e.exponents,
            e.epsilons.as_deref(),
            e.directions,
        )?],
        ExperimentKind::Density => {
            let ys = match &e.y {
                Some(y) => y.clone(),
                None => default_density_grid(&setup.model, setup.x[0], setup.t, e.y_points, e.y_sigmas).ok_or_else(
                    || {
                        SuiteError::Unsupported(format!(
                            "no exact marginal for `{}`; give an explicit y grid",
                            setup.model.name()
                        ))
                    },
                )?,
            };
            vec![check_density(&setup, &ys, e.weight_tolerance, e.kde_tolerance)?]
        }
    })
}

/// Runs one experiment; a check that cannot run becomes a failed report.
pub fn run_experiment(config: &RunConfig, e: &ExperimentConfig) -> Vec<ExperimentReport> {
    match dispatch(config, e) {
        Ok(r) => r,
        Err(err) => {
            let model = e.model.as_ref().unwrap_or(&config.model).name();
            let seed = e.seed.unwrap_or_else(|| experiment_seed(config.seed, &e.name));
            vec![ExperimentReport::errored(
                &e.name,
                e.kind,
                model,
                seed,
                &err.to_string(),
            )]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub reports: Vec<ExperimentReport>,
}

impl SuiteOutcome {
    pub fn count(&self, v: Verdict) -> usize {
        self.reports.iter().filter(|r| r.verdict == v).count()
    }

    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.verdict == Verdict::Pass)
    }

    /// 0 iff every report passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "passed": self.count(Verdict::Pass),
            "inconclusive": self.count(Verdict::Inconclusive),
            "failed": self.count(Verdict::Fail),
            "exit_code": self.exit_code(),
            "reports": self.reports,
        })
    }
}

/// Runs every experiment (concurrently) and returns the reports in
/// declaration order.
pub fn run_suite(config: &RunConfig) -> Result<SuiteOutcome, SuiteError> {
    let reports = with_threads(config.threads, || {
        config
            .experiments
            .par_iter()
            .map(|e| run_experiment(config, e))
            .collect::<Vec<_>>()
    })?;
    Ok(SuiteOutcome {
        reports: reports.into_iter().flatten().collect(),
    })
}

/// Writes `config.toml`, `report.json`, `summary.csv` and one
/// `density_<name>.csv` per density experiment into `dir`.
pub fn write_artifacts(dir: &Path, config: &RunConfig, outcome: &SuiteOutcome) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml_string())?;
    written.push(path);

    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&outcome.to_json()).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(&path, text)?;
    written.push(path);

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io::Error::other)?;
    w.write_record([
        "experiment",
        "kind",
        "model",
        "lhs",
        "rhs",
        "sigma",
        "budget",
        "verdict",
        "seed",
        "runtime_ms",
    ])
    .map_err(io::Error::other)?;
    for r in &outcome.reports {
        w.write_record([
            r.experiment.clone(),
            r.kind.as_str().to_string(),
            r.model.clone(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.sigma.to_string(),
            r.budget.to_string(),
            r.verdict.as_str().to_string(),
            r.seed.to_string(),
            r.runtime_ms.to_string(),
        ])
        .map_err(io::Error::other)?;
    }
    w.flush()?;
    written.push(path);

    for r in outcome.reports.iter().filter(|r| r.kind == ExperimentKind::Density) {
        let Some(ys) = r.details.get("ys").and_then(Value::as_array) else {
            continue;
        };
        let col = |key: &str| -> Vec<String> {
            r.details[key]
                .as_array()
                .map(|a| {
                    a.iter()
                        .map(|v| v.as_f64().map_or("NaN".into(), |f| f.to_string()))
                        .collect()
                })
                .unwrap_or_default()
        };
        let cols = [
            col("exact"),
            col("malliavin_weight"),
            col("malliavin_weight_stderr"),
            col("kde"),
        ];
        let safe: String = r
            .experiment
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let path = dir.join(format!("density_{safe}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(io::Error::other)?;
        w.write_record(["y", "exact", "malliavin_weight", "malliavin_weight_stderr", "kde"])
            .map_err(io::Error::other)?;
        for (i, y) in ys.iter().enumerate() {
            let mut row = vec![y.as_f64().unwrap_or(f64::NAN).to_string()];
            row.extend(cols.iter().map(|c| c.get(i).cloned().unwrap_or_default()));
            w.write_record(&row).map_err(io::Error::other)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::catalog;

    fn setup(model: VectorFieldSet, x: f64, n: usize, steps: usize) -> CheckSetup {
        CheckSetup::new("t", model, vec![x], 1.0, McConfig::new(n, steps, 5)).with_pde(Some(PdeResolution {
            nodes: 201,
            time_steps: 50,
        }))
    }

    #[test]
    fn verdict_rule() {
        assert_eq!(Verdict::compare(1.0, 1.02, 0.01, 0.0), Verdict::Pass);
        assert_eq!(Verdict::compare(1.0, 1.05, 0.01, 0.0), Verdict::Fail);
        assert_eq!(Verdict::compare(1.0, 1.05, 0.01, 0.03), Verdict::Pass);
        assert_eq!(Verdict::compare(0.0, 0.01, 0.1, 0.0), Verdict::Inconclusive);
        assert_eq!(Verdict::compare(f64::NAN, 0.0, 1.0, 1.0), Verdict::Fail);
        assert_eq!(Verdict::Pass.worst(Verdict::Inconclusive), Verdict::Inconclusive);
        assert_eq!(Verdict::Fail.worst(Verdict::Inconclusive), Verdict::Fail);
    }

    #[test]
    fn quasi_invariance_bm_shift() {
        let s = setup(catalog::bm(1), 0.0, 20_000, 16);
        let h = PerturbationSchedule::constant(vec![0.5]);
        let r = check_quasi_invariance(&s, &h, &[TestFunction::coordinate(0)]).unwrap();
        assert_eq!(r[0].verdict, Verdict::Pass, "{:?}", r[0]);
        assert!((r[0].lhs - 0.5).abs() < 0.05);
        assert_eq!(r[0].details["channels"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn quasi_invariance_zero_schedule_is_exact() {
        let s = setup(catalog::ou(1.0, 1.0), 0.3, 2_000, 8).with_pde(None);
        let h = PerturbationSchedule::zero(1);
        let r = check_quasi_invariance(&s, &h, &[TestFunction::square(0)]).unwrap();
        assert_eq!(r[0].lhs, r[0].rhs);
        assert_eq!(r[0].sigma, 0.0);
    }

    #[test]
    fn quasi_invariance_control_fails() {
        let s = setup(catalog::bm(1), 0.0, 20_000, 16).with_control(catalog::ou(1.0, 1.0));
        let h = PerturbationSchedule::constant(vec![0.5]);
        let r = check_quasi_invariance(&s, &h, &[TestFunction::coordinate(0)]).unwrap();
        assert_eq!(r[0].verdict, Verdict::Fail);
    }

    #[test]
    fn ibp_quadrature_bm_square() {
        let bm = Arc::new(catalog::bm(1));
        let h = PerturbationSchedule::constant(vec![0.5]);
        let axis = default_axis(&bm, 1.0, 1.0, 401).unwrap();
        let q = ibp_quadrature(&bm, &h, &TestFunction::square(0), 1.0, 1.0, 16, &axis, 100).unwrap();
        assert!((q - 1.0).abs() < 1e-3, "{q}");
    }

    #[test]
    fn ibp_rejects_two_dimensions() {
        let s = CheckSetup::new("t", catalog::bm(2), vec![0.0, 0.0], 1.0, McConfig::new(10, 2, 1));
        let h = PerturbationSchedule::constant(vec![0.5, 0.5]);
        assert!(matches!(
            check_elementary_ibp(&s, &h, &[TestFunction::coordinate(0)], 16),
            Err(SuiteError::Unsupported(_))
        ));
    }

    #[test]
    fn gradient_transfer_examples() {
        let s = setup(catalog::bm(1), 0.7, 4_000, 8);
        let fs = [TestFunction::square(0), TestFunction::constant(1.0)];
        let r = check_gradient_transfer(&s, &fs, 1e-3).unwrap();
        assert!((r[0].lhs - 1.4).abs() < 0.05);
        assert_eq!(r[1].lhs, 0.0);
        for rep in &r {
            assert_eq!(rep.verdict, Verdict::Pass, "{rep:?}");
        }
    }

    #[test]
    fn bismut_constant_is_zero() {
        let s = setup(catalog::ou(1.0, 1.0), 0.0, 20_000, 16);
        let r = check_bismut(&s, &[TestFunction::constant(1.0), TestFunction::coordinate(0)]).unwrap();
        assert_eq!(r[0].lhs, 0.0);
        for rep in &r {
            assert_eq!(rep.verdict, Verdict::Pass, "{rep:?}");
        }
    }

    #[test]
    fn nondegeneracy_bm_and_degenerate_plane() {
        let s = setup(catalog::bm(1), 0.0, 2_000, 8);
        let r = check_nondegeneracy(&s, &[1.0, 2.0], None, 64).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{}", r.details);
        let s = CheckSetup::new(
            "t",
            catalog::degenerate_plane(),
            vec![0.0, 0.0],
            1.0,
            McConfig::new(500, 8, 1),
        );
        let r = check_nondegeneracy(&s, &[1.0], None, 64).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.details["singular_fraction"], json!(1.0));
    }

    #[test]
    fn closed_form_moments() {
        let m = closed_form_inverse_moments(&catalog::ou(1.0, 1.0), 1.0, &[1.0]).unwrap();
        let v = ((2.0f64).exp() - 1.0) / 2.0;
        assert!((m[0] - 1.0 / v).abs() < 1e-12);
        assert!(closed_form_inverse_moments(&catalog::gbm(0.0, 0.5), 1.0, &[1.0]).is_none());
    }

    #[test]
    fn density_far_tail_is_zero() {
        let s = setup(catalog::bm(1), 0.0, 20_000, 1);
        let ys = [-8.0, -7.0, 7.0, 8.0];
        let r = check_density(&s, &ys, 0.01, 0.02).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.lhs < 1e-3 && r.rhs < 1e-3);
        let g = setup(catalog::gbm(0.0, 0.5), 1.0, 10, 1);
        assert!(check_density(&g, &ys, 0.01, 0.02).is_err());
    }

    #[test]
    fn suite_reports_in_declaration_order_and_writes_artifacts() {
        let text = r#"
n_paths = 500
n_steps = 4
[model]
name = "bm"
[[experiments]]
kind = "bismut"
name = "b"
f = ["one"]
[[experiments]]
kind = "elementary_ibp"
name = "bad"
model = { name = "bm", dim = 2 }
x = [0.0, 0.0]
[[experiments]]
kind = "density"
name = "dens"
y_points = 5
"#;
        let cfg = crate::config::parse_config(text).unwrap();
        let out = run_suite(&cfg).unwrap();
        let names: Vec<&str> = out.reports.iter().map(|r| r.experiment.as_str()).collect();
        assert_eq!(names, ["b/f=1", "bad", "dens"]);
        assert_eq!(out.reports[1].verdict, Verdict::Fail);
        assert_eq!(out.exit_code(), 1);
        let dir = std::env::temp_dir().join(format!("bismut-suite-{}", std::process::id()));
        let files = write_artifacts(&dir, &cfg, &out).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(f.starts_with(&dir));
        }
        let csv = fs::read_to_string(dir.join("density_dens.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        fs::remove_dir_all(&dir).unwrap();
    }
}

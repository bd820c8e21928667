//! Lifted systems on `R^d × (extra coordinates)`, canonicalized as Itô SDEs.
//!
//! Every lift is stored as a drift map plus one diffusion map per noise
//! channel. Where the underlying system is a Stratonovich one (the state, the
//! Jacobian flow `U`, its inverse `W = U^{-1}` and the lifted covariance), the
//! Itô correction `½ Σ Dσ_i σ_i` is added analytically from the supplied
//! Jacobians. The weight coordinates are Itô integrals by construction.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ModelError, PerturbationSchedule, StateFeedbackSchedule, VectorFieldSet};
use crate::field_model::FeedbackInput;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    /// `(x, u)`, `du = Σ h_t^i u dw^i`: the exponential Girsanov weight.
    Girsanov,
    /// `(x, u)`, `du = Σ h_t^i dw^i`: the elementary integration-by-parts weight.
    Ibp,
    /// `(x, U)` with the Jacobian flow `U_t = ∂x_t/∂x`.
    Jacobian,
    /// `(x, U, V)` with `dV = Σ (U^{-1}X_i)(U^{-1}X_i)^T dt`.
    Malliavin,
    /// `(x, U, V, u)` with `du = Σ φ_i(x, U^{-1}) dw^i`.
    BismutFeedback,
}

impl AugmentationKind {
    pub fn needs_schedule(self) -> Option<&'static str> {
        match self {
            Self::Girsanov | Self::Ibp => Some("perturbation"),
            Self::BismutFeedback => Some("state-feedback"),
            Self::Jacobian | Self::Malliavin => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Schedule {
    Perturbation(PerturbationSchedule),
    Feedback(StateFeedbackSchedule),
}

/// Which lift to build on top of which base model.
#[derive(Debug, Clone)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub base: Arc<VectorFieldSet>,
    pub schedule: Option<Schedule>,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, base: Arc<VectorFieldSet>, schedule: Option<Schedule>) -> Self {
        Self { kind, base, schedule }
    }

    pub fn girsanov(base: Arc<VectorFieldSet>, h: PerturbationSchedule) -> Self {
        Self::new(AugmentationKind::Girsanov, base, Some(Schedule::Perturbation(h)))
    }

    pub fn ibp(base: Arc<VectorFieldSet>, h: PerturbationSchedule) -> Self {
        Self::new(AugmentationKind::Ibp, base, Some(Schedule::Perturbation(h)))
    }

    pub fn jacobian(base: Arc<VectorFieldSet>) -> Self {
        Self::new(AugmentationKind::Jacobian, base, None)
    }

    pub fn malliavin(base: Arc<VectorFieldSet>) -> Self {
        Self::new(AugmentationKind::Malliavin, base, None)
    }

    pub fn bismut_feedback(base: Arc<VectorFieldSet>, phi: StateFeedbackSchedule) -> Self {
        Self::new(AugmentationKind::BismutFeedback, base, Some(Schedule::Feedback(phi)))
    }

    /// Feedback lift with the Bismut choice `φ_i = U^{-1} X_i`.
    pub fn bismut(base: Arc<VectorFieldSet>) -> Self {
        let d = base.dim();
        Self::bismut_feedback(base, StateFeedbackSchedule::bismut(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    State,
    Jacobian,
    InverseJacobian,
    /// Reduced covariance `V_t = ∫ Σ (U^{-1}X_i)(U^{-1}X_i)^T ds`.
    Covariance,
    /// `\hat V_t = U_t V_t`, simulated through its own linear SDE
    /// `d\hat V = DX_0 \hat V dt + Σ DX_i \hat V ∘ dw^i + U Σ(U^{-1}X_i)(U^{-1}X_i)^T dt`.
    LiftedCovariance,
    Weight,
}

/// Offsets of each block inside a flat augmented state. Matrices are
/// row-major `d × d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    dim: usize,
    len: usize,
    jacobian: Option<usize>,
    inverse_jacobian: Option<usize>,
    covariance: Option<usize>,
    lifted_covariance: Option<usize>,
    weight: Option<(usize, usize)>,
    girsanov_log: Option<usize>,
}

impl Layout {
    fn build(dim: usize, kind: Option<AugmentationKind>, weight_len: usize) -> Self {
        let d2 = dim * dim;
        let mut l = Layout {
            dim,
            len: dim,
            jacobian: None,
            inverse_jacobian: None,
            covariance: None,
            lifted_covariance: None,
            weight: None,
            girsanov_log: None,
        };
        let mut take = |n: usize| {
            let off = l.len;
            l.len += n;
            off
        };
        use AugmentationKind::*;
        match kind {
            None => {}
            Some(Girsanov) => {
                let w = take(1);
                let g = take(2);
                l.weight = Some((w, 1));
                l.girsanov_log = Some(g);
            }
            Some(Ibp) => l.weight = Some((take(weight_len), weight_len)),
            Some(Jacobian) => {
                l.jacobian = Some(take(d2));
                l.inverse_jacobian = Some(take(d2));
            }
            Some(Malliavin) => {
                l.jacobian = Some(take(d2));
                l.inverse_jacobian = Some(take(d2));
                l.covariance = Some(take(d2));
                l.lifted_covariance = Some(take(d2));
            }
            Some(BismutFeedback) => {
                l.jacobian = Some(take(d2));
                l.inverse_jacobian = Some(take(d2));
                l.covariance = Some(take(d2));
                l.weight = Some((take(weight_len), weight_len));
            }
        }
        l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of stored coordinates (including internal bookkeeping).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, block: Block) -> Option<Range<usize>> {
        let d2 = self.dim * self.dim;
        let mat = |o: Option<usize>| o.map(|o| o..o + d2);
        match block {
            Block::State => Some(0..self.dim),
            Block::Jacobian => mat(self.jacobian),
            Block::InverseJacobian => mat(self.inverse_jacobian),
            Block::Covariance => mat(self.covariance),
            Block::LiftedCovariance => mat(self.lifted_covariance),
            Block::Weight => self.weight.map(|(o, n)| o..o + n),
        }
    }

    pub fn has(&self, block: Block) -> bool {
        self.range(block).is_some()
    }

    /// Slice of `block` inside state `z`.
    pub fn get<'a>(&self, z: &'a [f64], block: Block) -> Option<&'a [f64]> {
        self.range(block).map(|r| &z[r])
    }

    pub fn x<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[..self.dim]
    }

    /// Column labels for CSV dumps, one per stored coordinate.
    pub fn component_names(&self) -> Vec<String> {
        let d = self.dim;
        let mut names = vec![String::new(); self.len];
        for k in 0..d {
            names[k] = format!("x{k}");
        }
        let mats = [
            (self.jacobian, "U"),
            (self.inverse_jacobian, "Uinv"),
            (self.covariance, "V"),
            (self.lifted_covariance, "Vhat"),
        ];
        for (off, tag) in mats {
            if let Some(o) = off {
                for r in 0..d {
                    for c in 0..d {
                        names[o + r * d + c] = format!("{tag}{r}{c}");
                    }
                }
            }
        }
        if let Some((o, n)) = self.weight {
            for k in 0..n {
                names[o + k] = format!("u{k}");
            }
        }
        if let Some(g) = self.girsanov_log {
            names[g] = "u_init".into();
            names[g + 1] = "log_weight".into();
        }
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    /// `dx = Y dt + Σ X_i dw^i`.
    Base,
    /// Base system with the extra drift `Σ h_t^i X_i`, i.e. generator `L + Σ h^i X_i`.
    Perturbed,
    Lift(AugmentationKind),
}

/// Executable Itô system: a layout, a drift map and per-noise diffusion maps.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    base: Arc<VectorFieldSet>,
    kind: SystemKind,
    layout: Layout,
    perturbation: Option<PerturbationSchedule>,
    feedback: Option<StateFeedbackSchedule>,
}

/// Per-worker scratch space for coefficient evaluation.
#[derive(Debug, Clone)]
pub struct Workspace {
    values: Vec<f64>,
    jacs: Vec<f64>,
    jdirs: Vec<f64>,
    jj: Vec<f64>,
    h: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    v1: Vec<f64>,
    fd: Vec<f64>,
}

impl Workspace {
    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    /// Row `i` (noise channel `i + 1`) of the diffusion, flat `m × len`.
    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }
}

fn check_schedule_noise(h: &PerturbationSchedule, base: &VectorFieldSet) -> Result<(), ModelError> {
    if h.num_noise() != base.num_noise() {
        return Err(ModelError::ScheduleMismatch {
            expected: base.num_noise(),
            got: h.num_noise(),
        });
    }
    Ok(())
}

/// Builds the executable lift described by `spec`.
pub fn build_augmentation(spec: &AugmentationSpec) -> Result<AugmentedSystem, ModelError> {
    let kind = spec.kind;
    let base = spec.base.clone();
    let d = base.dim();
    let (perturbation, feedback) = match (kind.needs_schedule(), &spec.schedule) {
        (None, None) => (None, None),
        (None, Some(_)) => return Err(ModelError::UnexpectedSchedule { kind }),
        (Some(needed), None) => return Err(ModelError::MissingSchedule { kind, needed }),
        (Some(needed), Some(Schedule::Perturbation(h))) => {
            if kind == AugmentationKind::BismutFeedback {
                return Err(ModelError::MissingSchedule { kind, needed });
            }
            check_schedule_noise(h, &base)?;
            (Some(h.clone()), None)
        }
        (Some(needed), Some(Schedule::Feedback(phi))) => {
            if kind != AugmentationKind::BismutFeedback {
                return Err(ModelError::MissingSchedule { kind, needed });
            }
            (None, Some(phi.clone()))
        }
    };
    let weight_len = match kind {
        AugmentationKind::BismutFeedback => feedback.as_ref().map_or(d, |f| f.out_dim()),
        _ => 1,
    };
    Ok(AugmentedSystem {
        layout: Layout::build(d, Some(kind), weight_len),
        base,
        kind: SystemKind::Lift(kind),
        perturbation,
        feedback,
    })
}

impl AugmentedSystem {
    pub fn base_system(base: Arc<VectorFieldSet>) -> Self {
        let d = base.dim();
        Self {
            layout: Layout::build(d, None, 0),
            base,
            kind: SystemKind::Base,
            perturbation: None,
            feedback: None,
        }
    }

    pub fn perturbed(base: Arc<VectorFieldSet>, h: PerturbationSchedule) -> Result<Self, ModelError> {
        check_schedule_noise(&h, &base)?;
        let d = base.dim();
        Ok(Self {
            layout: Layout::build(d, None, 0),
            base,
            kind: SystemKind::Perturbed,
            perturbation: Some(h),
            feedback: None,
        })
    }

    pub fn base(&self) -> &Arc<VectorFieldSet> {
        &self.base
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_noise(&self) -> usize {
        self.base.num_noise()
    }

    fn lift(&self) -> Option<AugmentationKind> {
        match self.kind {
            SystemKind::Lift(k) => Some(k),
            _ => None,
        }
    }

    pub fn workspace(&self) -> Workspace {
        let d = self.base.dim();
        let m = self.base.num_noise();
        let n = self.layout.len;
        Workspace {
            values: vec![0.0; (m + 1) * d],
            jacs: vec![0.0; (m + 1) * d * d],
            jdirs: vec![0.0; m * d * d],
            jj: vec![0.0; m * d * d],
            h: vec![0.0; m],
            drift: vec![0.0; n],
            diffusion: vec![0.0; m * n],
            m1: vec![0.0; d * d],
            m2: vec![0.0; d * d],
            m3: vec![0.0; d * d],
            v1: vec![0.0; d.max(self.layout.weight.map_or(0, |w| w.1))],
            fd: vec![0.0; 2 * d * (d + 1)],
        }
    }

    /// Initial augmented state over base point `x`: `U = W = I`, covariances
    /// zero, Girsanov weight one, additive weights zero.
    pub fn initial_state(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d = self.base.dim();
        if x.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let mut z = vec![0.0; self.layout.len];
        z[..d].copy_from_slice(x);
        for block in [Block::Jacobian, Block::InverseJacobian] {
            if let Some(r) = self.layout.range(block) {
                linalg::set_identity(&mut z[r], d);
            }
        }
        if self.lift() == Some(AugmentationKind::Girsanov) {
            self.set_weight(&mut z, 1.0);
        }
        Ok(z)
    }

    /// Sets every weight coordinate to `value`.
    pub fn set_weight(&self, z: &mut [f64], value: f64) {
        if let Some(r) = self.layout.range(Block::Weight) {
            z[r].iter_mut().for_each(|v| *v = value);
        }
        if let Some(g) = self.layout.girsanov_log {
            z[g] = value;
            z[g + 1] = 0.0;
        }
    }

    /// Sets the initial covariance offset `V_0` (and `\hat V_0 = V_0`).
    pub fn set_covariance(&self, z: &mut [f64], v0: &[f64]) {
        for block in [Block::Covariance, Block::LiftedCovariance] {
            if let Some(r) = self.layout.range(block) {
                z[r].copy_from_slice(v0);
            }
        }
    }

    /// Rough local Lipschitz constant of the Itô drift at `x`.
    pub fn local_lipschitz(&self, x: &[f64]) -> f64 {
        let d = self.base.dim();
        let mut j = vec![0.0; d * d];
        let mut total = 0.0;
        for (i, f) in self.base.fields().iter().enumerate() {
            f.jacobian(x, &mut j);
            let n = linalg::frobenius(&j);
            total += if i == 0 { n } else { n * n };
        }
        total
    }

    /// Itô (or, with `ito = false`, Stratonovich) drift and diffusion at
    /// `(t, z)`, written into the workspace.
    pub fn coefficients(&self, t: f64, z: &[f64], ws: &mut Workspace, ito: bool) {
        let d = self.base.dim();
        let d2 = d * d;
        let m = self.base.num_noise();
        let n = self.layout.len;
        let lay = &self.layout;
        let x = &z[..d];
        let fields = self.base.fields();
        let matrix_blocks = lay.jacobian.is_some();

        for (i, f) in fields.iter().enumerate() {
            f.eval(x, &mut ws.values[i * d..(i + 1) * d]);
            f.jacobian(x, &mut ws.jacs[i * d2..(i + 1) * d2]);
        }
        if matrix_blocks && ito {
            for i in 1..=m {
                let (vals, jd) = (&ws.values[i * d..(i + 1) * d], &mut ws.jdirs[(i - 1) * d2..i * d2]);
                fields[i].jacobian_along(x, vals, jd, &mut ws.fd);
                let ji = &ws.jacs[i * d2..(i + 1) * d2];
                linalg::matmul(ji, ji, &mut ws.jj[(i - 1) * d2..i * d2], d);
            }
        }
        if let Some(h) = &self.perturbation {
            h.eval_into(t, &mut ws.h);
        }

        ws.drift.iter_mut().for_each(|v| *v = 0.0);
        ws.diffusion.iter_mut().for_each(|v| *v = 0.0);

        // state
        ws.drift[..d].copy_from_slice(&ws.values[..d]);
        if ito {
            for i in 1..=m {
                let xi = &ws.values[i * d..(i + 1) * d];
                let ji = &ws.jacs[i * d2..(i + 1) * d2];
                for r in 0..d {
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += ji[r * d + c] * xi[c];
                    }
                    ws.drift[r] += 0.5 * acc;
                }
            }
        }
        if self.kind == SystemKind::Perturbed {
            for i in 1..=m {
                for r in 0..d {
                    ws.drift[r] += ws.h[i - 1] * ws.values[i * d + r];
                }
            }
        }
        for i in 1..=m {
            ws.diffusion[(i - 1) * n..(i - 1) * n + d].copy_from_slice(&ws.values[i * d..(i + 1) * d]);
        }

        // Linear blocks transported by the flow: U and \hat V.
        for off in [lay.jacobian, lay.lifted_covariance].into_iter().flatten() {
            let a = &z[off..off + d2];
            linalg::matmul(&ws.jacs[..d2], a, &mut ws.m1, d);
            ws.drift[off..off + d2].copy_from_slice(&ws.m1);
            for i in 1..=m {
                let ji = &ws.jacs[i * d2..(i + 1) * d2];
                linalg::matmul(ji, a, &mut ws.m1, d);
                ws.diffusion[(i - 1) * n + off..(i - 1) * n + off + d2].copy_from_slice(&ws.m1);
                if ito {
                    linalg::matmul(&ws.jdirs[(i - 1) * d2..i * d2], a, &mut ws.m1, d);
                    linalg::matmul(&ws.jj[(i - 1) * d2..i * d2], a, &mut ws.m2, d);
                    for k in 0..d2 {
                        ws.drift[off + k] += 0.5 * (ws.m1[k] + ws.m2[k]);
                    }
                }
            }
        }

        // Inverse flow W = U^{-1}: dW = −W DX_0 dt − Σ W DX_i ∘ dw^i.
        if let Some(off) = lay.inverse_jacobian {
            let w = &z[off..off + d2];
            linalg::matmul(w, &ws.jacs[..d2], &mut ws.m1, d);
            for k in 0..d2 {
                ws.drift[off + k] = -ws.m1[k];
            }
            for i in 1..=m {
                let ji = &ws.jacs[i * d2..(i + 1) * d2];
                linalg::matmul(w, ji, &mut ws.m1, d);
                for k in 0..d2 {
                    ws.diffusion[(i - 1) * n + off + k] = -ws.m1[k];
                }
                if ito {
                    linalg::matmul(w, &ws.jdirs[(i - 1) * d2..i * d2], &mut ws.m1, d);
                    linalg::matmul(w, &ws.jj[(i - 1) * d2..i * d2], &mut ws.m2, d);
                    for k in 0..d2 {
                        ws.drift[off + k] += 0.5 * (ws.m2[k] - ws.m1[k]);
                    }
                }
            }
        }

        // Σ (W X_i)(W X_i)^T feeds both covariance blocks.
        if lay.covariance.is_some() || lay.lifted_covariance.is_some() {
            let w = &z[lay.inverse_jacobian.expect("covariance blocks carry W")..][..d2];
            ws.m3.iter_mut().for_each(|v| *v = 0.0);
            for i in 1..=m {
                linalg::matvec(w, &ws.values[i * d..(i + 1) * d], &mut ws.v1[..d], d);
                for r in 0..d {
                    for c in 0..d {
                        ws.m3[r * d + c] += ws.v1[r] * ws.v1[c];
                    }
                }
            }
            if let Some(off) = lay.covariance {
                ws.drift[off..off + d2].copy_from_slice(&ws.m3);
            }
            if let Some(off) = lay.lifted_covariance {
                let u = &z[lay.jacobian.expect("lifted covariance carries U")..][..d2];
                linalg::matmul(u, &ws.m3, &mut ws.m1, d);
                for k in 0..d2 {
                    ws.drift[off + k] += ws.m1[k];
                }
            }
        }

        // Weights.
        if let Some((off, len)) = lay.weight {
            match self.lift() {
                Some(AugmentationKind::Girsanov) => {
                    for i in 0..m {
                        ws.diffusion[i * n + off] = ws.h[i] * z[off];
                    }
                }
                Some(AugmentationKind::Ibp) => {
                    for i in 0..m {
                        ws.diffusion[i * n + off] = ws.h[i];
                    }
                }
                Some(AugmentationKind::BismutFeedback) => {
                    let phi = self.feedback.as_ref().expect("feedback lift has a schedule");
                    let w = &z[lay.inverse_jacobian.expect("feedback lift carries W")..][..d2];
                    for i in 0..m {
                        let input = FeedbackInput {
                            x,
                            inverse_jacobian: w,
                            field_value: &ws.values[(i + 1) * d..(i + 2) * d],
                            noise: i,
                        };
                        phi.eval_into(&input, &mut ws.v1[..len]);
                        ws.diffusion[i * n + off..i * n + off + len].copy_from_slice(&ws.v1[..len]);
                    }
                }
                _ => {}
            }
        }
    }

    /// Itô drift at `(t, z)`.
    pub fn drift(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        self.coefficients(t, z, &mut ws, true);
        ws.drift
    }

    /// Diffusion column for noise channel `i ∈ 1..=m`.
    pub fn diffusion(&self, t: f64, z: &[f64], i: usize) -> Vec<f64> {
        assert!(i >= 1 && i <= self.num_noise(), "noise channels are 1..=m");
        let mut ws = self.workspace();
        self.coefficients(t, z, &mut ws, true);
        let n = self.layout.len;
        ws.diffusion[(i - 1) * n..i * n].to_vec()
    }

    /// Itô drift minus Stratonovich drift.
    pub fn stratonovich_correction(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        self.coefficients(t, z, &mut ws, false);
        let strat = ws.drift.clone();
        self.coefficients(t, z, &mut ws, true);
        ws.drift.iter().zip(&strat).map(|(a, b)| a - b).collect()
    }

    /// One Euler–Maruyama step of length `dt` with Brownian increments `dw`.
    /// The Girsanov weight is advanced in log form: `u = u_0 · exp(Σ∫h dw − ½∫|h|² dt)`.
    #[inline]
    pub fn step(&self, t: f64, dt: f64, z: &mut [f64], dw: &[f64], ws: &mut Workspace) {
        self.coefficients(t, z, ws, true);
        let n = self.layout.len;
        for k in 0..n {
            let mut inc = ws.drift[k] * dt;
            for (i, w) in dw.iter().enumerate() {
                inc += ws.diffusion[i * n + k] * w;
            }
            z[k] += inc;
        }
        if let Some(g) = self.layout.girsanov_log {
            let mut acc = 0.0;
            for (hi, w) in ws.h.iter().zip(dw) {
                acc += hi * w - 0.5 * hi * hi * dt;
            }
            z[g + 1] += acc;
            let (w_off, _) = self.layout.weight.expect("girsanov weight");
            z[w_off] = z[g] * z[g + 1].exp();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::catalog;

    fn bm() -> Arc<VectorFieldSet> {
        Arc::new(catalog::bm(1))
    }

    #[test]
    fn girsanov_on_bm_coefficients() {
        let c = 0.7;
        let sys = build_augmentation(&AugmentationSpec::girsanov(
            bm(),
            PerturbationSchedule::constant(vec![c]),
        ))
        .unwrap();
        let mut z = sys.initial_state(&[0.3]).unwrap();
        sys.set_weight(&mut z, 2.0);
        let drift = sys.drift(0.0, &z);
        assert_eq!(&drift[..2], &[0.0, 0.0]);
        let diff = sys.diffusion(0.0, &z, 1);
        assert_eq!(&diff[..2], &[1.0, c * 2.0]);
    }

    #[test]
    fn jacobian_on_ou_coefficients() {
        let ou = Arc::new(catalog::ou(1.0, 1.0));
        let sys = build_augmentation(&AugmentationSpec::jacobian(ou)).unwrap();
        let mut z = sys.initial_state(&[0.5]).unwrap();
        let u = sys.layout().range(Block::Jacobian).unwrap();
        z[u.start] = 0.8;
        let drift = sys.drift(0.0, &z);
        assert!((drift[u.start] + 0.8).abs() < 1e-15);
        assert_eq!(sys.diffusion(0.0, &z, 1)[u.start], 0.0);
    }

    #[test]
    fn malliavin_on_bm_covariance_rate() {
        let sys = build_augmentation(&AugmentationSpec::malliavin(bm())).unwrap();
        let z = sys.initial_state(&[0.0]).unwrap();
        let v = sys.layout().range(Block::Covariance).unwrap();
        let drift = sys.drift(0.0, &z);
        assert_eq!(drift[v.start], 1.0);
        assert_eq!(sys.diffusion(0.0, &z, 1)[v.start], 0.0);
    }

    #[test]
    fn gbm_jacobian_ito_correction() {
        let sigma = 0.6;
        let gbm = Arc::new(catalog::gbm(0.0, sigma));
        let sys = build_augmentation(&AugmentationSpec::jacobian(gbm)).unwrap();
        let z = sys.initial_state(&[1.0]).unwrap();
        let corr = sys.stratonovich_correction(0.0, &z);
        let u = sys.layout().range(Block::Jacobian).unwrap().start;
        let w = sys.layout().range(Block::InverseJacobian).unwrap().start;
        assert!((corr[0] - 0.5 * sigma * sigma).abs() < 1e-14);
        assert!((corr[u] - 0.5 * sigma * sigma).abs() < 1e-14);
        assert!((corr[w] - 0.5 * sigma * sigma).abs() < 1e-14);
    }

    #[test]
    fn schedule_presence_enforced() {
        let spec = AugmentationSpec::new(AugmentationKind::Girsanov, bm(), None);
        assert!(matches!(
            build_augmentation(&spec),
            Err(ModelError::MissingSchedule { .. })
        ));
        let spec = AugmentationSpec::new(
            AugmentationKind::Jacobian,
            bm(),
            Some(Schedule::Perturbation(PerturbationSchedule::zero(1))),
        );
        assert!(matches!(
            build_augmentation(&spec),
            Err(ModelError::UnexpectedSchedule { .. })
        ));
        let spec = AugmentationSpec::girsanov(bm(), PerturbationSchedule::zero(2));
        assert!(matches!(
            build_augmentation(&spec),
            Err(ModelError::ScheduleMismatch { .. })
        ));
        let spec = AugmentationSpec::new(
            AugmentationKind::BismutFeedback,
            bm(),
            Some(Schedule::Perturbation(PerturbationSchedule::zero(1))),
        );
        assert!(build_augmentation(&spec).is_err());
    }

    #[test]
    fn layouts() {
        let ou = Arc::new(catalog::ou(1.0, 1.0));
        let h = PerturbationSchedule::zero(1);
        let sizes = [
            (AugmentationSpec::girsanov(ou.clone(), h.clone()), 4),
            (AugmentationSpec::ibp(ou.clone(), h), 2),
            (AugmentationSpec::jacobian(ou.clone()), 3),
            (AugmentationSpec::malliavin(ou.clone()), 5),
            (AugmentationSpec::bismut(ou), 5),
        ];
        for (spec, len) in sizes {
            let sys = build_augmentation(&spec).unwrap();
            assert_eq!(sys.layout().len(), len, "{:?}", spec.kind);
            assert_eq!(sys.layout().component_names().len(), len);
        }
    }
}

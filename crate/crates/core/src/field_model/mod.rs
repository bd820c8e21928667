//! Driving vector fields, the Hörmander-form generator and the lifted field
//! systems built on top of them.
//!
//! A [`VectorFieldSet`] holds `X_0` (the drift field) and `X_1..X_m` (the
//! diffusion fields) together with their Jacobians. The diffusion it describes
//! is the Stratonovich SDE `dx = X_0 dt + Σ X_i ∘ dw^i`, whose generator is
//! `L = X_0 + ½ Σ X_i²`.

mod augment;
pub mod catalog;
mod directions;
mod schedule;
mod test_function;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg;

pub use augment::{
    build_augmentation, AugmentationKind, AugmentationSpec, AugmentedSystem, Block, Layout, Schedule, SystemKind,
    Workspace,
};
pub use directions::direction_net;
pub use schedule::{FeedbackInput, PerturbationSchedule, StateFeedbackSchedule};
pub use test_function::TestFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model needs at least one diffusion field")]
    NoNoise,
    #[error("field {field} returned a non-finite value at check point {point:?}")]
    NonFinite { field: usize, point: Vec<f64> },
    #[error(
        "jacobian of field {field} disagrees with finite differences at {point:?} \
         (entry {entry}: supplied {supplied}, finite difference {fd})"
    )]
    InconsistentJacobian {
        field: usize,
        point: Vec<f64>,
        entry: usize,
        supplied: f64,
        fd: f64,
    },
    #[error("augmentation {kind:?} requires a {needed} schedule")]
    MissingSchedule {
        kind: AugmentationKind,
        needed: &'static str,
    },
    #[error("augmentation {kind:?} does not take a schedule")]
    UnexpectedSchedule { kind: AugmentationKind },
    #[error("schedule has {got} noise channels, model has {expected}")]
    ScheduleMismatch { expected: usize, got: usize },
    #[error("test function `{0}` has no {1} and finite-difference fallback is disabled")]
    MissingDerivative(String, &'static str),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

pub type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type DirectionalFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// One smooth field `R^d → R^d` with its Jacobian (row-major `d × d`).
///
/// The optional `jacobian_derivative` returns `D(DX)(x)[v]`, the derivative of
/// the Jacobian along `v`. It only enters the Itô correction of the Jacobian
/// lifts; when absent it is taken by central differences of the supplied
/// Jacobian, which is exact for affine fields.
#[derive(Clone)]
pub struct VectorField {
    value: Arc<FieldFn>,
    jacobian: Arc<FieldFn>,
    jacobian_derivative: Option<Arc<DirectionalFn>>,
}

impl VectorField {
    pub fn new<F, J>(value: F, jacobian: J) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        J: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            value: Arc::new(value),
            jacobian: Arc::new(jacobian),
            jacobian_derivative: None,
        }
    }

    pub fn with_jacobian_derivative<K>(mut self, k: K) -> Self
    where
        K: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.jacobian_derivative = Some(Arc::new(k));
        self
    }

    pub fn constant(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::new(
            move |_, out| out.copy_from_slice(&v),
            move |_, out| out[..n * n].iter_mut().for_each(|e| *e = 0.0),
        )
        .with_jacobian_derivative(|_, _, out| out.iter_mut().for_each(|e| *e = 0.0))
    }

    /// The affine field `x ↦ A x + b` (`A` row-major).
    pub fn affine(a: Vec<f64>, b: Vec<f64>) -> Self {
        let n = b.len();
        assert_eq!(a.len(), n * n, "affine field needs a square matrix");
        let a2 = a.clone();
        Self::new(
            move |x, out| {
                linalg::matvec(&a, x, out, n);
                for (o, bi) in out.iter_mut().zip(&b) {
                    *o += bi;
                }
            },
            move |_, out| out.copy_from_slice(&a2),
        )
        .with_jacobian_derivative(|_, _, out| out.iter_mut().for_each(|e| *e = 0.0))
    }

    #[inline]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.value)(x, out)
    }

    #[inline]
    pub fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.jacobian)(x, out)
    }

    /// `D(DX)(x)[v]`, written row-major into `out` (`d × d`). `scratch` must
    /// hold at least `2 d (d + 1)` entries for the finite-difference fallback.
    pub fn jacobian_along(&self, x: &[f64], v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        if let Some(k) = &self.jacobian_derivative {
            return k(x, v, out);
        }
        let d = x.len();
        let vn = linalg::norm(v);
        if vn == 0.0 {
            out.iter_mut().for_each(|e| *e = 0.0);
            return;
        }
        let xn = linalg::norm(x);
        let eps = 1e-5 * (1.0 + xn) / vn;
        let (xp, rest) = scratch.split_at_mut(d);
        let (jp, rest) = rest.split_at_mut(d * d);
        let (xm, rest) = rest.split_at_mut(d);
        let jm = &mut rest[..d * d];
        for k in 0..d {
            xp[k] = x[k] + eps * v[k];
            xm[k] = x[k] - eps * v[k];
        }
        (self.jacobian)(xp, jp);
        (self.jacobian)(xm, jm);
        for k in 0..d * d {
            out[k] = (jp[k] - jm[k]) / (2.0 * eps);
        }
    }
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("closed_form_second_derivative", &self.jacobian_derivative.is_some())
            .finish()
    }
}

/// Where the state of a model lives. Only used to pick sensible PDE domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Whole,
    /// The positive half-line is invariant (e.g. geometric Brownian motion).
    PositiveHalfLine,
}

/// The fields `X_0, X_1, …, X_m` on `R^d`; immutable once built.
#[derive(Clone, Debug)]
pub struct VectorFieldSet {
    name: String,
    dim: usize,
    fields: Vec<VectorField>,
    support: Support,
}

pub struct VectorFieldSetBuilder {
    name: String,
    dim: usize,
    drift: Option<VectorField>,
    noise: Vec<VectorField>,
    check_points: Option<Vec<Vec<f64>>>,
    support: Support,
}

impl VectorFieldSetBuilder {
    pub fn drift(mut self, field: VectorField) -> Self {
        self.drift = Some(field);
        self
    }

    pub fn noise(mut self, field: VectorField) -> Self {
        self.noise.push(field);
        self
    }

    /// Points at which Jacobians are checked against finite differences.
    pub fn check_points(mut self, points: Vec<Vec<f64>>) -> Self {
        self.check_points = Some(points);
        self
    }

    pub fn support(mut self, support: Support) -> Self {
        self.support = support;
        self
    }

    pub fn build(self) -> Result<VectorFieldSet, ModelError> {
        if self.noise.is_empty() {
            return Err(ModelError::NoNoise);
        }
        let d = self.dim;
        let drift = self.drift.unwrap_or_else(|| VectorField::constant(vec![0.0; d]));
        let mut fields = vec![drift];
        fields.extend(self.noise);
        let set = VectorFieldSet {
            name: self.name,
            dim: d,
            fields,
            support: self.support,
        };
        let points = self.check_points.unwrap_or_else(|| default_check_points(d));
        for p in &points {
            if p.len() != d {
                return Err(ModelError::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            set.check_consistency_at(p)?;
        }
        Ok(set)
    }
}

fn default_check_points(d: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]];
    for k in 0..d {
        for &s in &[-1.0, -0.3, 0.7, 1.2] {
            let mut p = vec![0.1; d];
            p[k] = s;
            pts.push(p);
        }
    }
    pts
}

impl VectorFieldSet {
    pub fn builder(name: impl Into<String>, dim: usize) -> VectorFieldSetBuilder {
        VectorFieldSetBuilder {
            name: name.into(),
            dim,
            drift: None,
            noise: Vec::new(),
            check_points: None,
            support: Support::Whole,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_noise(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// Index 0 is the drift field, 1..=m the diffusion fields.
    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    fn check_consistency_at(&self, p: &[f64]) -> Result<(), ModelError> {
        let d = self.dim;
        let mut val = vec![f64::NAN; d];
        let mut jac = vec![f64::NAN; d * d];
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for (i, field) in self.fields.iter().enumerate() {
            val.iter_mut().for_each(|v| *v = f64::NAN);
            jac.iter_mut().for_each(|v| *v = f64::NAN);
            field.eval(p, &mut val);
            field.jacobian(p, &mut jac);
            if val.iter().chain(&jac).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    field: i,
                    point: p.to_vec(),
                });
            }
            let scale = jac.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for col in 0..d {
                let h = 1e-5 * (1.0 + p[col].abs());
                let mut xp = p.to_vec();
                let mut xm = p.to_vec();
                xp[col] += h;
                xm[col] -= h;
                field.eval(&xp, &mut fp);
                field.eval(&xm, &mut fm);
                for row in 0..d {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    let supplied = jac[row * d + col];
                    if (fd - supplied).abs() > 1e-5 * scale {
                        return Err(ModelError::InconsistentJacobian {
                            field: i,
                            point: p.to_vec(),
                            entry: row * d + col,
                            supplied,
                            fd,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Itô drift `Y = X_0 + ½ Σ_{i≥1} DX_i X_i`.
    pub fn ito_drift(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let d = self.dim;
        let mut y = vec![0.0; d];
        self.ito_drift_into(x, &mut y, &mut vec![0.0; d], &mut vec![0.0; d * d]);
        Ok(y)
    }

    pub(crate) fn ito_drift_into(&self, x: &[f64], out: &mut [f64], v: &mut [f64], j: &mut [f64]) {
        let d = self.dim;
        self.fields[0].eval(x, out);
        for field in &self.fields[1..] {
            field.eval(x, v);
            field.jacobian(x, j);
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += j[r * d + c] * v[c];
                }
                out[r] += 0.5 * acc;
            }
        }
    }

    /// `Lf(x) = ⟨X_0,Df⟩ + ½Σ⟨DX_i X_i, Df⟩ + ½Σ⟨X_i, D²f X_i⟩`.
    ///
    /// Derivatives of `f` come from its closed forms; with `allow_fd` they fall
    /// back to central differences with step `1e-4 (1 + |x|)`.
    pub fn apply_generator(&self, f: &TestFunction, x: &[f64], allow_fd: bool) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        let d = self.dim;
        let grad = f.gradient_or_fd(x, allow_fd)?;
        let hess = f.hessian_or_fd(x, allow_fd)?;
        let y = self.ito_drift(x)?;
        let mut total = linalg::dot(&y, &grad);
        let mut v = vec![0.0; d];
        let mut hv = vec![0.0; d];
        for field in &self.fields[1..] {
            field.eval(x, &mut v);
            linalg::matvec(&hess, &v, &mut hv, d);
            total += 0.5 * linalg::dot(&v, &hv);
        }
        Ok(total)
    }

    /// Σ_{i≥1} X_i(x) X_i(x)^T, row-major.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        let mut v = vec![0.0; d];
        for field in &self.fields[1..] {
            field.eval(x, &mut v);
            for r in 0..d {
                for c in 0..d {
                    a[r * d + c] += v[r] * v[c];
                }
            }
        }
        Ok(a)
    }

    /// Lower estimate of the ellipticity constant at `x`: the minimum of
    /// `Σ⟨X_i(x), ξ⟩²` over a deterministic net of `n_dirs` unit directions
    /// (the coordinate axes are always included). Values below `1e-14` are
    /// reported as exactly zero.
    pub fn ellipticity_margin(&self, x: &[f64], n_dirs: usize) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        let d = self.dim;
        let n = n_dirs.max(2 * d);
        let mut v = vec![0.0; d];
        let values: Vec<Vec<f64>> = self.fields[1..]
            .iter()
            .map(|f| {
                f.eval(x, &mut v);
                v.clone()
            })
            .collect();
        let margin = direction_net(d, n)
            .iter()
            .map(|xi| values.iter().map(|xv| linalg::dot(xv, xi).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        Ok(if margin < 1e-14 { 0.0 } else { margin })
    }

    /// Exact ellipticity constant at `x`: smallest eigenvalue of `Σ X_i X_i^T`.
    /// Only offered for `d ≤ 3`.
    pub fn ellipticity_exact(&self, x: &[f64]) -> Result<Option<f64>, ModelError> {
        if self.dim > 3 {
            return Ok(None);
        }
        let a = self.diffusion_matrix(x)?;
        let ev = linalg::symmetric_eigenvalues(&a, self.dim);
        Ok(Some(ev[0].max(0.0)))
    }

    /// Detects the additive-noise affine class (`X_0` affine, `X_i` constant
    /// for `i ≥ 1`) by probing Jacobians at a few points. On that class the
    /// Jacobian flow and the reduced covariance are path-independent.
    pub fn affine_additive_coefficients(&self) -> Option<AffineAdditive> {
        let d = self.dim;
        let probes = default_check_points(d);
        let mut j0 = vec![0.0; d * d];
        let mut j = vec![0.0; d * d];
        let mut v = vec![0.0; d];
        let origin = vec![0.0; d];
        self.fields[0].jacobian(&origin, &mut j0);
        for p in &probes {
            self.fields[0].jacobian(p, &mut j);
            if j.iter().zip(&j0).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs())) {
                return None;
            }
            for field in &self.fields[1..] {
                field.jacobian(p, &mut j);
                if j.iter().any(|e| e.abs() > 1e-12) {
                    return None;
                }
            }
        }
        let mut offset = vec![0.0; d];
        self.fields[0].eval(&origin, &mut offset);
        let noise = self.fields[1..]
            .iter()
            .map(|f| {
                f.eval(&origin, &mut v);
                v.clone()
            })
            .collect();
        Some(AffineAdditive {
            linear: j0,
            offset,
            noise,
        })
    }
}

/// `dx = (A x + b) dt + Σ σ_i dw^i` with constant `σ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAdditive {
    pub linear: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
}

impl AffineAdditive {
    /// Mean and variance of the one-dimensional marginal at time `t`.
    pub fn gaussian_marginal_1d(&self, x: f64, t: f64) -> (f64, f64) {
        let beta = self.linear[0];
        let alpha = self.offset[0];
        let s2: f64 = self.noise.iter().map(|s| s[0] * s[0]).sum();
        if beta.abs() < 1e-12 {
            (x + alpha * t, s2 * t)
        } else {
            let e = (beta * t).exp();
            (
                x * e + alpha * (e - 1.0) / beta,
                s2 * ((2.0 * beta * t).exp() - 1.0) / (2.0 * beta),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::catalog;
    use super::*;

    #[test]
    fn ito_drift_catalog_examples() {
        let bm = catalog::bm(1);
        assert_eq!(bm.ito_drift(&[0.7]).unwrap(), vec![0.0]);
        let gbm = catalog::gbm(0.0, 1.0);
        assert!((gbm.ito_drift(&[0.8]).unwrap()[0] - 0.4).abs() < 1e-15);
        let ou = catalog::ou(1.0, 1.0);
        assert!((ou.ito_drift(&[0.8]).unwrap()[0] + 0.8).abs() < 1e-15);
        assert!(matches!(
            ou.ito_drift(&[0.0, 1.0]),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn generator_examples() {
        let bm = catalog::bm(1);
        let sq = TestFunction::square(0);
        assert!((bm.apply_generator(&sq, &[0.3], false).unwrap() - 1.0).abs() < 1e-14);
        let ou = catalog::ou(1.0, 1.0);
        let lin = TestFunction::coordinate(0);
        assert!((ou.apply_generator(&lin, &[0.4], false).unwrap() + 0.4).abs() < 1e-14);
        let one = TestFunction::constant(1.0);
        assert_eq!(ou.apply_generator(&one, &[2.0], false).unwrap(), 0.0);
    }

    #[test]
    fn generator_without_hessian_needs_fallback() {
        let bm = catalog::bm(1);
        let f = TestFunction::from_value("cube", |x: &[f64]| x[0].powi(3));
        assert!(matches!(
            bm.apply_generator(&f, &[1.0], false),
            Err(ModelError::MissingDerivative(..))
        ));
        // ½ f'' = 3x
        let lf = bm.apply_generator(&f, &[1.0], true).unwrap();
        assert!((lf - 3.0).abs() < 1e-5, "{lf}");
    }

    #[test]
    fn ellipticity_examples() {
        assert_eq!(catalog::bm(1).ellipticity_margin(&[0.3], 2).unwrap(), 1.0);
        let plane = catalog::bm(2);
        assert!((plane.ellipticity_margin(&[0.0, 0.0], 64).unwrap() - 1.0).abs() < 1e-12);
        let degenerate = catalog::degenerate_plane();
        assert_eq!(degenerate.ellipticity_margin(&[0.0, 0.0], 64).unwrap(), 0.0);
        assert_eq!(degenerate.ellipticity_exact(&[0.0, 0.0]).unwrap(), Some(0.0));
    }

    #[test]
    fn bad_jacobian_rejected() {
        let err = VectorFieldSet::builder("bad", 1)
            .noise(VectorField::new(|x, out| out[0] = x[0] * x[0], |x, out| out[0] = x[0]))
            .build()
            .unwrap_err();
        assert!(matches!(err, ModelError::InconsistentJacobian { .. }));
    }

    #[test]
    fn missing_noise_rejected() {
        assert_eq!(
            VectorFieldSet::builder("empty", 1).build().unwrap_err(),
            ModelError::NoNoise
        );
    }

    #[test]
    fn affine_class_detection() {
        assert!(catalog::ou(1.0, 0.5).affine_additive_coefficients().is_some());
        assert!(catalog::bm(1).affine_additive_coefficients().is_some());
        assert!(catalog::gbm(0.0, 1.0).affine_additive_coefficients().is_none());
        let ou = catalog::ou(1.0, 1.0).affine_additive_coefficients().unwrap();
        let (m, v) = ou.gaussian_marginal_1d(1.0, 1.0);
        assert!((m - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-15);
    }
}

//! Finite-difference solver for `∂_τ F = L F` in one or two space dimensions.
//!
//! `L F = Σ a_jk ∂_j∂_k F + Σ b_j ∂_j F + c F` with `a = ½ Σ σ_i σ_i^T`.
//! Time is counted backwards from the horizon: after solving to `τ = t` the
//! grid holds `E[f(x_t) | x_0 = ·]` for the diffusion whose coefficients at
//! SDE time `s` are those passed in, evaluated at `s = t − τ`.
//!
//! Crank–Nicolson in time with the first step replaced by two implicit Euler
//! half-steps, central differences in space, Dirichlet rows that freeze the
//! initial data on the boundary.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::field_model::{
    AugmentationKind, AugmentationSpec, ModelError, PerturbationSchedule, Schedule, Support, VectorFieldSet,
};
use crate::mc_semigroup::SemigroupEstimate;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("grids of dimension {0} are not supported (1 or 2 only)")]
    Dimension(usize),
    #[error("axis needs at least 3 nodes and lo < hi (got {nodes} nodes on [{lo}, {hi}])")]
    BadAxis { lo: f64, hi: f64, nodes: usize },
    #[error("time step count must be positive")]
    NoSteps,
    #[error("singular linear system at time step {0}")]
    Singular(usize),
    #[error("iterative solver did not converge at time step {step} (residual {residual:e})")]
    NoConvergence { step: usize, residual: f64 },
    #[error("point {0:?} lies outside the grid domain")]
    OutsideDomain(Vec<f64>),
    #[error("non-finite value in solution")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Unsupported(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self, PdeError> {
        if nodes < 3 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(PdeError::BadAxis { lo, hi, nodes });
        }
        Ok(Self { lo, hi, nodes })
    }

    /// `[center − half_width, center + half_width]`.
    pub fn centered(center: f64, half_width: f64, nodes: usize) -> Result<Self, PdeError> {
        Self::new(center - half_width, center + half_width, nodes)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    /// Same interval with every cell halved.
    pub fn refined(&self) -> Self {
        Self {
            nodes: 2 * self.nodes - 1,
            ..*self
        }
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Cell index and fractional position of `x`.
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.lo) / self.spacing();
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, s - i as f64)
    }
}

type MatrixFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type ScalarFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Generator coefficients at SDE time `s`: `a(s, x)` (symmetric, row-major),
/// `b(s, x)` and optional `c(s, x)`.
#[derive(Clone)]
pub struct Coefficients {
    dim: usize,
    a: Arc<MatrixFn>,
    b: Arc<MatrixFn>,
    c: Option<Arc<ScalarFn>>,
}

impl std::fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coefficients").field("dim", &self.dim).finish()
    }
}

impl Coefficients {
    pub fn new<A, B>(dim: usize, a: A, b: B) -> Self
    where
        A: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            a: Arc::new(a),
            b: Arc::new(b),
            c: None,
        }
    }

    pub fn with_potential<C>(mut self, c: C) -> Self
    where
        C: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.c = Some(Arc::new(c));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Generator of the base diffusion: `a = ½ Σ X_i X_i^T`, `b = Y`.
    pub fn from_model(vfs: Arc<VectorFieldSet>) -> Self {
        Self::with_extra_drift(vfs, None)
    }

    /// Generator `L + Σ h_s^i X_i`.
    pub fn perturbed(vfs: Arc<VectorFieldSet>, h: PerturbationSchedule) -> Self {
        Self::with_extra_drift(vfs, Some(h))
    }

    fn with_extra_drift(vfs: Arc<VectorFieldSet>, h: Option<PerturbationSchedule>) -> Self {
        let d = vfs.dim();
        let va = vfs.clone();
        Self::new(
            d,
            move |_, x, out| {
                let m = va.diffusion_matrix(x).expect("dimension checked by grid");
                for (o, v) in out.iter_mut().zip(m) {
                    *o = 0.5 * v;
                }
            },
            move |s, x, out| {
                let mut v = vec![0.0; d];
                let mut j = vec![0.0; d * d];
                vfs.ito_drift_into(x, out, &mut v, &mut j);
                if let Some(h) = &h {
                    let hs = h.eval(s);
                    for (i, hi) in hs.iter().enumerate() {
                        vfs.field(i + 1).eval(x, &mut v);
                        for r in 0..d {
                            out[r] += hi * v[r];
                        }
                    }
                }
            },
        )
    }

    /// Generator of the Girsanov or integration-by-parts lift of a
    /// one-dimensional model, on `(x, u)`.
    pub fn for_lift(spec: &AugmentationSpec) -> Result<Self, PdeError> {
        let vfs = spec.base.clone();
        if vfs.dim() != 1 {
            return Err(PdeError::Unsupported("lifted PDE needs a one-dimensional base".into()));
        }
        let h = match (&spec.kind, &spec.schedule) {
            (AugmentationKind::Girsanov | AugmentationKind::Ibp, Some(Schedule::Perturbation(h))) => h.clone(),
            _ => {
                return Err(PdeError::Unsupported(format!(
                    "no PDE form for the {:?} lift",
                    spec.kind
                )))
            }
        };
        let girsanov = spec.kind == AugmentationKind::Girsanov;
        let m = vfs.num_noise();
        let va = vfs.clone();
        let ha = h.clone();
        Ok(Self::new(
            2,
            move |s, z, out| {
                let hs = ha.eval(s);
                let mut v = [0.0];
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..m {
                    va.field(i + 1).eval(&z[..1], &mut v);
                    let su = if girsanov { hs[i] * z[1] } else { hs[i] };
                    out[0] += 0.5 * v[0] * v[0];
                    out[1] += 0.5 * v[0] * su;
                    out[3] += 0.5 * su * su;
                }
                out[2] = out[1];
            },
            move |_, z, out| {
                let mut y = [0.0];
                let mut v = [0.0];
                let mut j = [0.0];
                vfs.ito_drift_into(&z[..1], &mut y, &mut v, &mut j);
                out[0] = y[0];
                out[1] = 0.0;
            },
        ))
    }
}

/// Default truncated axis for a model started at `x0`: `x0 ± (8·sd + |Y| t)`
/// with `sd = √(Σ X_i(x0)² t)`, or `[0, x0·exp(8 sd_log + |Y/x0| t)]` for
/// models living on the positive half-line, stretched so that `x0` is a node.
pub fn default_axis(vfs: &VectorFieldSet, x0: f64, t: f64, nodes: usize) -> Result<Axis, PdeError> {
    if vfs.dim() != 1 {
        return Err(PdeError::Dimension(vfs.dim()));
    }
    let a = vfs.diffusion_matrix(&[x0])?[0];
    let y = vfs.ito_drift(&[x0])?[0];
    let sd = (a * t).sqrt();
    match vfs.support() {
        Support::PositiveHalfLine if x0 > 0.0 => {
            let log_sd = sd / x0;
            let hi = x0 * (8.0 * log_sd + (y / x0).abs() * t).exp();
            // Stretch `hi` so that x0 is a node at every refinement level.
            let cells = nodes.saturating_sub(1).max(1) as f64;
            let j = (cells * x0 / hi).round().max(1.0);
            Axis::new(0.0, cells * x0 / j, nodes)
        }
        _ => Axis::centered(x0, 8.0 * sd.max(1e-3) + y.abs() * t, nodes),
    }
}

/// Default `u`-axis of the extended solves: `±exp(4‖h‖√t)` for the Girsanov
/// lift and `±4‖h‖√t` for the integration-by-parts lift (at least `±2` so
/// the starting values `u = 0, 1` stay interior).
pub fn default_weight_axis(kind: AugmentationKind, h_bound: f64, t: f64, nodes: usize) -> Result<Axis, PdeError> {
    let half = match kind {
        AugmentationKind::Girsanov => (4.0 * h_bound * t.sqrt()).exp(),
        _ => 4.0 * h_bound * t.sqrt(),
    };
    Axis::centered(0.0, half.max(2.0), nodes)
}

/// Solution of one parabolic solve at `τ = t`.
#[derive(Debug, Clone, Serialize)]
pub struct GridSolution {
    pub axes: Vec<Axis>,
    /// Row-major, the first axis varies slowest.
    pub values: Vec<f64>,
    pub t: f64,
    pub time_steps: usize,
    pub boundary: &'static str,
    /// Solution at half the resolution, kept for the Richardson budget.
    #[serde(skip)]
    pub coarse: Option<Box<GridSolution>>,
}

impl GridSolution {
    fn check_inside(&self, p: &[f64]) -> Result<(), PdeError> {
        if p.len() != self.axes.len() || !self.axes.iter().zip(p).all(|(a, x)| a.contains(*x)) {
            return Err(PdeError::OutsideDomain(p.to_vec()));
        }
        Ok(())
    }

    fn node(&self, idx: &[usize]) -> f64 {
        match idx {
            [i] => self.values[*i],
            [i, j] => self.values[i * self.axes[1].nodes + j],
            _ => unreachable!(),
        }
    }

    /// Linear (1-D) or bilinear (2-D) interpolation.
    pub fn interpolate(&self, p: &[f64]) -> Result<f64, PdeError> {
        self.check_inside(p)?;
        Ok(match self.axes.len() {
            1 => {
                let (i, s) = self.axes[0].locate(p[0]);
                self.node(&[i]) * (1.0 - s) + self.node(&[i + 1]) * s
            }
            _ => {
                let (i, s) = self.axes[0].locate(p[0]);
                let (j, r) = self.axes[1].locate(p[1]);
                self.node(&[i, j]) * (1.0 - s) * (1.0 - r)
                    + self.node(&[i + 1, j]) * s * (1.0 - r)
                    + self.node(&[i, j + 1]) * (1.0 - s) * r
                    + self.node(&[i + 1, j + 1]) * s * r
            }
        })
    }

    /// Central-difference gradient with one grid spacing.
    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>, PdeError> {
        self.check_inside(p)?;
        (0..p.len())
            .map(|k| {
                let h = self.axes[k].spacing();
                let mut hi = p.to_vec();
                let mut lo = p.to_vec();
                hi[k] = (p[k] + h).min(self.axes[k].hi);
                lo[k] = (p[k] - h).max(self.axes[k].lo);
                Ok((self.interpolate(&hi)? - self.interpolate(&lo)?) / (hi[k] - lo[k]))
            })
            .collect()
    }

    /// `|v_h − v_{h/2}|` at `p` when a coarse companion solve exists.
    pub fn budget_at(&self, p: &[f64]) -> Result<f64, PdeError> {
        match &self.coarse {
            Some(c) => Ok((c.interpolate(p)? - self.interpolate(p)?).abs()),
            None => Ok(0.0),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }

    /// CSV with one column per axis coordinate followed by `value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PdeError> {
        let mut w = csv::Writer::from_writer(out);
        let names = ["x", "u"];
        let mut header: Vec<&str> = names[..self.axes.len()].to_vec();
        header.push("value");
        w.write_record(&header)?;
        match self.axes.len() {
            1 => {
                for i in 0..self.axes[0].nodes {
                    w.write_record([self.axes[0].coord(i).to_string(), self.values[i].to_string()])?;
                }
            }
            _ => {
                for i in 0..self.axes[0].nodes {
                    for j in 0..self.axes[1].nodes {
                        w.write_record([
                            self.axes[0].coord(i).to_string(),
                            self.axes[1].coord(j).to_string(),
                            self.node(&[i, j]).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sparse matrix in compressed-row form.
#[derive(Debug, Clone, Default)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yr = s;
        }
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.row_ptr.len() - 1)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .find(|&k| self.cols[k] == r)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }
}

/// Discrete operator `L_h` at one time: interior rows only, boundary rows empty.
enum Operator {
    Tri {
        lower: Vec<f64>,
        diag: Vec<f64>,
        upper: Vec<f64>,
    },
    Sparse(Csr),
}

impl Operator {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Operator::Tri { lower, diag, upper } => {
                let n = x.len();
                for i in 0..n {
                    let mut s = diag[i] * x[i];
                    if i > 0 {
                        s += lower[i] * x[i - 1];
                    }
                    if i + 1 < n {
                        s += upper[i] * x[i + 1];
                    }
                    y[i] = s;
                }
            }
            Operator::Sparse(m) => m.mul(x, y),
        }
    }
}

fn peclet_warning(a: f64, b: f64, h: f64, warned: &mut bool) {
    if *warned {
        return;
    }
    let pe = if a > 0.0 {
        b.abs() * h / a
    } else if b != 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    if pe > 2.0 {
        log::warn!("mesh Péclet number {pe:.2} exceeds 2; central differences may oscillate");
        *warned = true;
    }
}

struct Assembler<'a> {
    coeffs: &'a Coefficients,
    axes: &'a [Axis],
    points: Vec<Vec<f64>>,
}

impl<'a> Assembler<'a> {
    fn new(coeffs: &'a Coefficients, axes: &'a [Axis]) -> Self {
        let points = match axes.len() {
            1 => (0..axes[0].nodes).map(|i| vec![axes[0].coord(i)]).collect(),
            _ => {
                let mut p = Vec::with_capacity(axes[0].nodes * axes[1].nodes);
                for i in 0..axes[0].nodes {
                    for j in 0..axes[1].nodes {
                        p.push(vec![axes[0].coord(i), axes[1].coord(j)]);
                    }
                }
                p
            }
        };
        Self { coeffs, axes, points }
    }

    fn assemble(&self, s: f64, warned: &mut bool) -> Operator {
        let dim = self.axes.len();
        let mut a = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        match dim {
            1 => {
                let n = self.axes[0].nodes;
                let h = self.axes[0].spacing();
                let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 1..n - 1 {
                    let x = &self.points[i];
                    (self.coeffs.a)(s, x, &mut a);
                    (self.coeffs.b)(s, x, &mut b);
                    peclet_warning(a[0], b[0], h, warned);
                    let c = self.coeffs.c.as_ref().map_or(0.0, |c| c(s, x));
                    lower[i] = a[0] / (h * h) - b[0] / (2.0 * h);
                    upper[i] = a[0] / (h * h) + b[0] / (2.0 * h);
                    diag[i] = -2.0 * a[0] / (h * h) + c;
                }
                Operator::Tri { lower, diag, upper }
            }
            _ => {
                let (n1, n2) = (self.axes[0].nodes, self.axes[1].nodes);
                let (h1, h2) = (self.axes[0].spacing(), self.axes[1].spacing());
                let mut m = Csr {
                    row_ptr: vec![0],
                    ..Default::default()
                };
                for i in 0..n1 {
                    for j in 0..n2 {
                        let row = i * n2 + j;
                        if i > 0 && i + 1 < n1 && j > 0 && j + 1 < n2 {
                            let z = &self.points[row];
                            (self.coeffs.a)(s, z, &mut a);
                            (self.coeffs.b)(s, z, &mut b);
                            peclet_warning(a[0], b[0], h1, warned);
                            peclet_warning(a[3], b[1], h2, warned);
                            let c = self.coeffs.c.as_ref().map_or(0.0, |c| c(s, z));
                            let xx = a[0] / (h1 * h1);
                            let yy = a[3] / (h2 * h2);
                            let xy = 2.0 * a[1] / (4.0 * h1 * h2);
                            let bx = b[0] / (2.0 * h1);
                            let by = b[1] / (2.0 * h2);
                            let entries = [
                                (row - n2 - 1, xy),
                                (row - n2, xx - bx),
                                (row - n2 + 1, -xy),
                                (row - 1, yy - by),
                                (row, -2.0 * xx - 2.0 * yy + c),
                                (row + 1, yy + by),
                                (row + n2 - 1, -xy),
                                (row + n2, xx + bx),
                                (row + n2 + 1, xy),
                            ];
                            for (col, v) in entries {
                                if v != 0.0 || col == row {
                                    m.cols.push(col);
                                    m.vals.push(v);
                                }
                            }
                        }
                        m.row_ptr.push(m.cols.len());
                    }
                }
                Operator::Sparse(m)
            }
        }
    }
}

/// Solves `(I − θ dt L) x = rhs` with boundary rows fixed to the identity.
fn solve_step(op: &Operator, theta_dt: f64, rhs: &[f64], x: &mut [f64], step: usize) -> Result<(), PdeError> {
    match op {
        Operator::Tri { lower, diag, upper } => {
            let n = rhs.len();
            // (I − θ dt L): boundary rows have zero L entries, so they are identity rows.
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            let b0 = 1.0 - theta_dt * diag[0];
            if b0.abs() < 1e-300 {
                return Err(PdeError::Singular(step));
            }
            c[0] = -theta_dt * upper[0] / b0;
            d[0] = rhs[0] / b0;
            for i in 1..n {
                let a = -theta_dt * lower[i];
                let b = 1.0 - theta_dt * diag[i];
                let den = b - a * c[i - 1];
                if den.abs() < 1e-300 {
                    return Err(PdeError::Singular(step));
                }
                c[i] = if i + 1 < n { -theta_dt * upper[i] / den } else { 0.0 };
                d[i] = (rhs[i] - a * d[i - 1]) / den;
            }
            x[n - 1] = d[n - 1];
            for i in (0..n - 1).rev() {
                x[i] = d[i] - c[i] * x[i + 1];
            }
            Ok(())
        }
        Operator::Sparse(l) => {
            let mut m = l.clone();
            for v in m.vals.iter_mut() {
                *v *= -theta_dt;
            }
            // Add the identity; every row either has its diagonal or is empty.
            let mut out = Csr {
                row_ptr: vec![0],
                ..Default::default()
            };
            for r in 0..rhs.len() {
                let (s, e) = (m.row_ptr[r], m.row_ptr[r + 1]);
                if s == e {
                    out.cols.push(r);
                    out.vals.push(1.0);
                } else {
                    for k in s..e {
                        out.cols.push(m.cols[k]);
                        out.vals.push(m.vals[k] + if m.cols[k] == r { 1.0 } else { 0.0 });
                    }
                }
                out.row_ptr.push(out.cols.len());
            }
            bicgstab(&out, rhs, x, step)
        }
    }
}

/// Jacobi-preconditioned BiCGSTAB; `x` holds the initial guess.
fn bicgstab(a: &Csr, b: &[f64], x: &mut [f64], step: usize) -> Result<(), PdeError> {
    let n = b.len();
    let dinv: Vec<f64> = a
        .diag()
        .iter()
        .map(|d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 })
        .collect();
    if a.diag().iter().any(|d| d.abs() <= 1e-300) {
        return Err(PdeError::Singular(step));
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let bnorm = dot(b, b).sqrt().max(1e-300);
    let tol = 1e-12;
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zv = vec![0.0; n];
    let mut tv = vec![0.0; n];
    let mut res = dot(&r, &r).sqrt() / bnorm;
    if res < tol {
        return Ok(());
    }
    for _ in 0..2000 {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = dinv[i] * p[i];
        }
        a.mul(&y, &mut v);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
            zv[i] = dinv[i] * s[i];
        }
        a.mul(&zv, &mut tv);
        let tt = dot(&tv, &tv);
        omega = if tt > 0.0 { dot(&tv, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zv[i];
            r[i] = s[i] - omega * tv[i];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        if res < tol {
            return Ok(());
        }
        if omega == 0.0 {
            break;
        }
    }
    if res < 1e-9 {
        Ok(())
    } else {
        Err(PdeError::NoConvergence { step, residual: res })
    }
}

/// Solves `∂_τ F = L_{t−τ} F`, `F(0) = f`, up to `τ = t` with `time_steps`
/// steps.
pub fn solve_parabolic(
    coeffs: &Coefficients,
    f: &dyn Fn(&[f64]) -> f64,
    axes: &[Axis],
    t: f64,
    time_steps: usize,
) -> Result<GridSolution, PdeError> {
    if axes.is_empty() || axes.len() > 2 || axes.len() != coeffs.dim {
        return Err(PdeError::Dimension(axes.len()));
    }
    if time_steps == 0 {
        return Err(PdeError::NoSteps);
    }
    let asm = Assembler::new(coeffs, axes);
    let mut u: Vec<f64> = asm.points.iter().map(|p| f(p)).collect();
    let n = u.len();
    let mut out = GridSolution {
        axes: axes.to_vec(),
        values: Vec::new(),
        t,
        time_steps,
        boundary: "dirichlet-frozen-initial-data",
        coarse: None,
    };
    if t == 0.0 {
        out.values = u;
        return Ok(out);
    }
    let dt = t / time_steps as f64;
    let mut warned = false;
    let mut rhs = vec![0.0; n];
    let mut lu = vec![0.0; n];
    let mut next = u.clone();

    // Rannacher startup: two implicit Euler half-steps.
    for k in 0..2 {
        let tau = (k + 1) as f64 * 0.5 * dt;
        let op = asm.assemble(t - tau, &mut warned);
        rhs.copy_from_slice(&u);
        solve_step(&op, 0.5 * dt, &rhs, &mut next, 0)?;
        std::mem::swap(&mut u, &mut next);
    }
    let mut op_prev = asm.assemble(t - dt, &mut warned);
    for step in 1..time_steps {
        let tau_next = (step + 1) as f64 * dt;
        let op_next = asm.assemble(t - tau_next, &mut warned);
        op_prev.apply(&u, &mut lu);
        for i in 0..n {
            rhs[i] = u[i] + 0.5 * dt * lu[i];
        }
        next.copy_from_slice(&u);
        solve_step(&op_next, 0.5 * dt, &rhs, &mut next, step)?;
        std::mem::swap(&mut u, &mut next);
        op_prev = op_next;
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite);
    }
    out.values = u;
    Ok(out)
}

/// Solves at the given resolution and at half the spacing (and half the time
/// step), returning the fine solution with the coarse one attached for
/// [`GridSolution::budget_at`].
pub fn solve_parabolic_with_budget(
    coeffs: &Coefficients,
    f: &dyn Fn(&[f64]) -> f64,
    axes: &[Axis],
    t: f64,
    time_steps: usize,
) -> Result<GridSolution, PdeError> {
    let coarse = solve_parabolic(coeffs, f, axes, t, time_steps)?;
    let fine_axes: Vec<Axis> = axes.iter().map(Axis::refined).collect();
    let mut fine = solve_parabolic(coeffs, f, &fine_axes, t, 2 * time_steps)?;
    fine.coarse = Some(Box::new(coarse));
    Ok(fine)
}

/// Solves the extended equation `∂_τ F = \tilde L F` of a Girsanov or
/// integration-by-parts lift of a one-dimensional model on `(x, u)`.
pub fn solve_extended(
    spec: &AugmentationSpec,
    f: &dyn Fn(&[f64]) -> f64,
    axes: &[Axis; 2],
    t: f64,
    time_steps: usize,
) -> Result<GridSolution, PdeError> {
    let coeffs = Coefficients::for_lift(spec)?;
    solve_parabolic_with_budget(&coeffs, f, axes, t, time_steps)
}

/// Outcome of comparing a grid value with a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleComparison {
    pub grid_value: f64,
    pub mc_value: f64,
    pub mc_stderr: f64,
    pub budget: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Pass iff `|grid − mc| ≤ 3·stderr + |v_h − v_{h/2}|`.
pub fn oracle_compare(
    grid: &GridSolution,
    point: &[f64],
    mc: &SemigroupEstimate,
) -> Result<OracleComparison, PdeError> {
    let g = grid.interpolate(point)?;
    let budget = grid.budget_at(point)?;
    let tolerance = 3.0 * mc.scalar_stderr() + budget;
    let difference = (g - mc.scalar()).abs();
    Ok(OracleComparison {
        grid_value: g,
        mc_value: mc.scalar(),
        mc_stderr: mc.scalar_stderr(),
        budget,
        difference,
        tolerance,
        pass: difference <= tolerance,
    })
}

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w));
    }
    out.reverse();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::catalog;

    fn bm_coeffs() -> Coefficients {
        Coefficients::from_model(Arc::new(catalog::bm(1)))
    }

    #[test]
    fn bm_square() {
        let axis = Axis::new(-8.0, 8.0, 401).unwrap();
        let sol = solve_parabolic(&bm_coeffs(), &|x| x[0] * x[0], &[axis], 1.0, 200).unwrap();
        let v = sol.interpolate(&[0.0]).unwrap();
        assert!((0.995..=1.005).contains(&v), "{v}");
    }

    #[test]
    fn ou_mean() {
        let ou = Arc::new(catalog::ou(1.0, 1.0));
        let axis = default_axis(&ou, 1.0, 1.0, 401).unwrap();
        let sol = solve_parabolic(&Coefficients::from_model(ou), &|x| x[0], &[axis], 1.0, 200).unwrap();
        assert!((sol.interpolate(&[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn zero_time_returns_data() {
        let axis = Axis::new(-1.0, 1.0, 11).unwrap();
        let sol = solve_parabolic(&bm_coeffs(), &|x| x[0].sin(), &[axis], 0.0, 5).unwrap();
        for i in 0..11 {
            assert_eq!(sol.values[i], axis.coord(i).sin());
        }
    }

    #[test]
    fn outside_domain_rejected() {
        let axis = Axis::new(-1.0, 1.0, 11).unwrap();
        let sol = solve_parabolic(&bm_coeffs(), &|x| x[0], &[axis], 0.1, 5).unwrap();
        assert!(matches!(sol.interpolate(&[2.0]), Err(PdeError::OutsideDomain(_))));
    }

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        for n in [1, 2, 5, 16, 32] {
            let q = gauss_legendre(n, 0.0, 2.0);
            let total: f64 = q.iter().map(|(_, w)| w).sum();
            assert!((total - 2.0).abs() < 1e-13, "n={n}");
            let deg = 2 * n - 1;
            let integral: f64 = q.iter().map(|(x, w)| w * x.powi(deg as i32)).sum();
            let exact = 2f64.powi(deg as i32 + 1) / (deg + 1) as f64;
            assert!((integral - exact).abs() < 1e-10 * exact, "n={n}");
        }
    }

    #[test]
    fn girsanov_extended_shifted_mean() {
        let c = 0.5;
        let bm = Arc::new(catalog::bm(1));
        let spec = AugmentationSpec::girsanov(bm.clone(), PerturbationSchedule::constant(vec![c]));
        let xa = default_axis(&bm, 0.0, 1.0, 161).unwrap();
        let ua = default_weight_axis(AugmentationKind::Girsanov, c, 1.0, 41).unwrap();
        let sol = solve_extended(&spec, &|z| z[0] * z[1], &[xa, ua], 1.0, 100).unwrap();
        let v = sol.interpolate(&[0.0, 1.0]).unwrap();
        assert!((v - c).abs() < 1e-3, "{v}");
    }

    #[test]
    fn ibp_extended() {
        let c = 0.5;
        let bm = Arc::new(catalog::bm(1));
        let spec = AugmentationSpec::ibp(bm.clone(), PerturbationSchedule::constant(vec![c]));
        let xa = default_axis(&bm, 0.0, 1.0, 161).unwrap();
        let ua = default_weight_axis(AugmentationKind::Ibp, c, 1.0, 41).unwrap();
        let sol = solve_extended(&spec, &|z| z[1] * z[0] * z[0], &[xa, ua], 1.0, 100).unwrap();
        for x in [0.0, 1.0] {
            let v = sol.interpolate(&[x, 0.0]).unwrap();
            assert!((v - 2.0 * c * x).abs() < 1e-3, "x={x} {v}");
        }
    }
}

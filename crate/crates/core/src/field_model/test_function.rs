use std::fmt;
use std::sync::Arc;

use super::ModelError;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Scalar test function `f: R^d → R` with optional closed-form derivatives.
///
/// The fixed dictionary used by the experiments acts on a single axis:
/// `1`, `x`, `x²` and the Gaussian bump `exp(−(x − c)²)`.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradFn>>,
    hessian: Option<Arc<GradFn>>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

impl TestFunction {
    pub fn from_value<F>(name: impl Into<String>, value: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    /// Hessian written row-major into a `d × d` buffer.
    pub fn with_hessian<H>(mut self, h: H) -> Self
    where
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(h));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::from_value(format!("{c}"), move |_| c)
            .with_gradient(|_, g| g.iter_mut().for_each(|v| *v = 0.0))
            .with_hessian(|_, h| h.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `f(x) = x_axis`.
    pub fn coordinate(axis: usize) -> Self {
        Self::from_value("x", move |x| x[axis])
            .with_gradient(move |_, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[axis] = 1.0;
            })
            .with_hessian(|_, h| h.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `f(x) = x_axis²`.
    pub fn square(axis: usize) -> Self {
        Self::from_value("x2", move |x| x[axis] * x[axis])
            .with_gradient(move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[axis] = 2.0 * x[axis];
            })
            .with_hessian(move |x, h| {
                let d = x.len();
                h.iter_mut().for_each(|v| *v = 0.0);
                h[axis * d + axis] = 2.0;
            })
    }

    /// `f(x) = exp(−(x_axis − c)²)`.
    pub fn bump(axis: usize, center: f64) -> Self {
        let e = move |x: &[f64]| (-(x[axis] - center).powi(2)).exp();
        Self::from_value("bump", e)
            .with_gradient(move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[axis] = -2.0 * (x[axis] - center) * e(x);
            })
            .with_hessian(move |x, h| {
                let d = x.len();
                let z = x[axis] - center;
                h.iter_mut().for_each(|v| *v = 0.0);
                h[axis * d + axis] = (4.0 * z * z - 2.0) * e(x);
            })
    }

    /// `1{x_axis > y}`; no derivatives.
    pub fn indicator_above(axis: usize, y: f64) -> Self {
        Self::from_value("indicator", move |x| if x[axis] > y { 1.0 } else { 0.0 })
    }

    /// Looks up a dictionary entry by name: `one`, `x`, `x2`, `bump`.
    pub fn dictionary(name: &str, axis: usize, bump_center: f64) -> Option<Self> {
        match name {
            "one" | "1" => Some(Self::constant(1.0)),
            "x" => Some(Self::coordinate(axis)),
            "x2" => Some(Self::square(axis)),
            "bump" => Some(Self::bump(axis, bump_center)),
            _ => None,
        }
    }

    pub const DICTIONARY: [&'static str; 4] = ["one", "x", "x2", "bump"];

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Closed-form gradient; `false` if none was supplied.
    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.gradient {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }

    fn fd_step(x: &[f64]) -> f64 {
        1e-4 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn gradient_or_fd(&self, x: &[f64], allow_fd: bool) -> Result<Vec<f64>, ModelError> {
        let d = x.len();
        let mut g = vec![0.0; d];
        if self.gradient_into(x, &mut g) {
            return Ok(g);
        }
        if !allow_fd {
            return Err(ModelError::MissingDerivative(self.name.clone(), "gradient"));
        }
        let h = Self::fd_step(x);
        let mut p = x.to_vec();
        for k in 0..d {
            p[k] = x[k] + h;
            let fp = self.eval(&p);
            p[k] = x[k] - h;
            let fm = self.eval(&p);
            p[k] = x[k];
            g[k] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    pub fn hessian_or_fd(&self, x: &[f64], allow_fd: bool) -> Result<Vec<f64>, ModelError> {
        let d = x.len();
        let mut out = vec![0.0; d * d];
        if let Some(hf) = &self.hessian {
            hf(x, &mut out);
            return Ok(out);
        }
        if !allow_fd {
            return Err(ModelError::MissingDerivative(self.name.clone(), "hessian"));
        }
        let h = Self::fd_step(x);
        let f0 = self.eval(x);
        let mut p = x.to_vec();
        for i in 0..d {
            for j in 0..d {
                let v = if i == j {
                    p[i] = x[i] + h;
                    let fp = self.eval(&p);
                    p[i] = x[i] - h;
                    let fm = self.eval(&p);
                    (fp - 2.0 * f0 + fm) / (h * h)
                } else {
                    let mut corner = |si: f64, sj: f64| {
                        p[i] = x[i] + si * h;
                        p[j] = x[j] + sj * h;
                        let v = self.eval(&p);
                        p[i] = x[i];
                        p[j] = x[j];
                        v
                    };
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h * h)
                };
                p[i] = x[i];
                out[i * d + j] = v;
            }
        }
        Ok(out)
    }
}

use std::fmt;
use std::sync::Arc;

type HFn = dyn Fn(f64, &mut [f64]) + Send + Sync;
type PhiFn = dyn Fn(&FeedbackInput<'_>, &mut [f64]) + Send + Sync;

/// Deterministic, state-independent perturbation `t ↦ h_t ∈ R^m`.
#[derive(Clone)]
pub struct PerturbationSchedule {
    label: String,
    num_noise: usize,
    bound: f64,
    h: Arc<HFn>,
}

impl fmt::Debug for PerturbationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationSchedule")
            .field("label", &self.label)
            .field("num_noise", &self.num_noise)
            .field("bound", &self.bound)
            .finish()
    }
}

impl PerturbationSchedule {
    /// `bound` must dominate `|h_t|` (Euclidean) on the horizon of interest.
    pub fn new<F>(label: impl Into<String>, num_noise: usize, bound: f64, h: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            num_noise,
            bound,
            h: Arc::new(h),
        }
    }

    pub fn constant(values: Vec<f64>) -> Self {
        let bound = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let label = if values.iter().all(|v| *v == values[0]) {
            format!("const({})", values[0])
        } else {
            format!("const({values:?})")
        };
        Self::new(label, values.len(), bound, move |_, out| out.copy_from_slice(&values))
    }

    /// `h_t^i = amplitude · sin(2π · frequency · t)` on every noise channel.
    pub fn sine(num_noise: usize, amplitude: f64, frequency: f64) -> Self {
        let bound = amplitude.abs() * (num_noise as f64).sqrt();
        Self::new(
            format!("sin({amplitude},{frequency})"),
            num_noise,
            bound,
            move |t, out| {
                let v = amplitude * (2.0 * std::f64::consts::PI * frequency * t).sin();
                out.iter_mut().for_each(|o| *o = v);
            },
        )
    }

    pub fn zero(num_noise: usize) -> Self {
        Self::constant(vec![0.0; num_noise])
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn num_noise(&self) -> usize {
        self.num_noise
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    #[inline]
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        (self.h)(t, out)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_noise];
        self.eval_into(t, &mut out);
        out
    }
}

/// Arguments handed to a state-feedback coefficient.
pub struct FeedbackInput<'a> {
    pub x: &'a [f64],
    /// Co-simulated `U^{-1}` (row-major `d × d`).
    pub inverse_jacobian: &'a [f64],
    /// `X_i(x)` for the noise channel being driven.
    pub field_value: &'a [f64],
    /// Noise channel `i ≥ 1`, zero-based here (`0` is `X_1`).
    pub noise: usize,
}

/// State-dependent coefficient driving the weight block of the feedback lift:
/// channel `i` contributes `φ_i(x, U^{-1}) dw^i` with `φ_i ∈ R^k`.
#[derive(Clone)]
pub struct StateFeedbackSchedule {
    label: String,
    out_dim: usize,
    growth_exponent: f64,
    phi: Arc<PhiFn>,
}

impl fmt::Debug for StateFeedbackSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateFeedbackSchedule")
            .field("label", &self.label)
            .field("out_dim", &self.out_dim)
            .field("growth_exponent", &self.growth_exponent)
            .finish()
    }
}

impl StateFeedbackSchedule {
    pub fn new<F>(label: impl Into<String>, out_dim: usize, growth_exponent: f64, phi: F) -> Self
    where
        F: Fn(&FeedbackInput<'_>, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            out_dim,
            growth_exponent,
            phi: Arc::new(phi),
        }
    }

    /// The Bismut choice `φ_i = U^{-1} X_i(x)`, so the weight block
    /// accumulates `Σ_i ∫ U_s^{-1} X_i(x_s) dw_s^i ∈ R^d`.
    pub fn bismut(dim: usize) -> Self {
        Self::new("bismut", dim, 1.0, move |inp, out| {
            crate::linalg::matvec(inp.inverse_jacobian, inp.field_value, out, dim)
        })
    }

    /// Scalar feedback `⟨φ(x), h⟩^i` given per-channel coefficients.
    pub fn scalar<F>(label: impl Into<String>, growth_exponent: f64, phi: F) -> Self
    where
        F: Fn(&[f64], usize) -> f64 + Send + Sync + 'static,
    {
        Self::new(label, 1, growth_exponent, move |inp, out| {
            out[0] = phi(inp.x, inp.noise)
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    #[inline]
    pub fn eval_into(&self, input: &FeedbackInput<'_>, out: &mut [f64]) {
        (self.phi)(input, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_sine() {
        let c = PerturbationSchedule::constant(vec![0.5]);
        assert_eq!(c.eval(0.3), vec![0.5]);
        assert_eq!(c.bound(), 0.5);
        let s = PerturbationSchedule::sine(2, 1.0, 1.0);
        let v = s.eval(0.25);
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
        assert_eq!(s.eval(0.25), s.eval(0.25));
    }
}

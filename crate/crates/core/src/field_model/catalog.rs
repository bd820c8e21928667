//! Built-in models addressable by name: `bm`, `ou`, `gbm`, `poly`.

use std::sync::Arc;

use super::{ModelError, Support, VectorField, VectorFieldSet};

pub const MODEL_NAMES: [&str; 4] = ["bm", "ou", "gbm", "poly"];

/// Standard Brownian motion on `R^d`: `X_0 = 0`, `X_i = e_i`.
pub fn bm(dim: usize) -> VectorFieldSet {
    let mut b = VectorFieldSet::builder("bm", dim);
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        b = b.noise(VectorField::constant(e));
    }
    b.build().expect("catalog bm is consistent")
}

/// Ornstein–Uhlenbeck: `X_0(x) = −a x`, `X_1 = σ`.
pub fn ou(a: f64, sigma: f64) -> VectorFieldSet {
    VectorFieldSet::builder("ou", 1)
        .drift(VectorField::affine(vec![-a], vec![0.0]))
        .noise(VectorField::constant(vec![sigma]))
        .build()
        .expect("catalog ou is consistent")
}

/// Geometric Brownian motion in Stratonovich form: `X_0(x) = μ x`, `X_1(x) = σ x`.
pub fn gbm(mu: f64, sigma: f64) -> VectorFieldSet {
    VectorFieldSet::builder("gbm", 1)
        .drift(VectorField::affine(vec![mu], vec![0.0]))
        .noise(VectorField::affine(vec![sigma], vec![0.0]))
        .support(Support::PositiveHalfLine)
        .build()
        .expect("catalog gbm is consistent")
}

/// `d = 2` with the single field `X_1 = (1, 0)`: fails ellipticity.
pub fn degenerate_plane() -> VectorFieldSet {
    VectorFieldSet::builder("degenerate_plane", 2)
        .noise(VectorField::constant(vec![1.0, 0.0]))
        .build()
        .expect("consistent")
}

/// A polynomial in `d` variables stored as `(coefficient, exponents)` terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub terms: Vec<(f64, Vec<u32>)>,
}

fn pow(x: f64, e: u32) -> f64 {
    x.powi(e as i32)
}

impl Polynomial {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, e)| c * e.iter().zip(x).map(|(&p, &v)| pow(v, p)).product::<f64>())
            .sum()
    }

    /// ∂/∂x_j
    pub fn partial(&self, x: &[f64], j: usize) -> f64 {
        self.terms
            .iter()
            .filter(|(_, e)| e[j] > 0)
            .map(|(c, e)| {
                let mut prod = c * e[j] as f64;
                for (k, (&p, &v)) in e.iter().zip(x).enumerate() {
                    prod *= if k == j { pow(v, p - 1) } else { pow(v, p) };
                }
                prod
            })
            .sum()
    }

    /// ∂²/∂x_j∂x_l
    pub fn second_partial(&self, x: &[f64], j: usize, l: usize) -> f64 {
        self.terms
            .iter()
            .filter(|(_, e)| if j == l { e[j] > 1 } else { e[j] > 0 && e[l] > 0 })
            .map(|(c, e)| {
                let mut prod = *c;
                for (k, (&p, &v)) in e.iter().zip(x).enumerate() {
                    let mut p = p;
                    if k == j {
                        prod *= p as f64;
                        p -= 1;
                    }
                    if k == l {
                        prod *= p as f64;
                        p -= 1;
                    }
                    prod *= pow(v, p);
                }
                prod
            })
            .sum()
    }
}

/// One field per entry; each field is `d` polynomial components.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    pub dim: usize,
    pub drift: Vec<Polynomial>,
    pub noise: Vec<Vec<Polynomial>>,
}

fn poly_field(components: Vec<Polynomial>) -> VectorField {
    let comps = Arc::new(components);
    let (c1, c2, c3) = (comps.clone(), comps.clone(), comps);
    VectorField::new(
        move |x, out| {
            for (o, p) in out.iter_mut().zip(c1.iter()) {
                *o = p.eval(x);
            }
        },
        move |x, out| {
            let d = x.len();
            for (r, p) in c2.iter().enumerate() {
                for c in 0..d {
                    out[r * d + c] = p.partial(x, c);
                }
            }
        },
    )
    .with_jacobian_derivative(move |x, v, out| {
        let d = x.len();
        for (r, p) in c3.iter().enumerate() {
            for c in 0..d {
                out[r * d + c] = (0..d).map(|l| p.second_partial(x, c, l) * v[l]).sum();
            }
        }
    })
}

pub fn poly(model: &PolyModel) -> Result<VectorFieldSet, ModelError> {
    let d = model.dim;
    let check = |comps: &[Polynomial]| -> Result<(), ModelError> {
        if comps.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                got: comps.len(),
            });
        }
        for p in comps {
            for (_, e) in &p.terms {
                if e.len() != d {
                    return Err(ModelError::DimensionMismatch {
                        expected: d,
                        got: e.len(),
                    });
                }
            }
        }
        Ok(())
    };
    check(&model.drift)?;
    let mut b = VectorFieldSet::builder("poly", d).drift(poly_field(model.drift.clone()));
    for f in &model.noise {
        check(f)?;
        b = b.noise(poly_field(f.clone()));
    }
    b.build()
}

/// Default `poly` model when none is configured: `X_0(x) = −x − 0.1 x³`,
/// `X_1(x) = 1 + 0.1 x`. Elliptic near the origin, with a random Malliavin
/// covariance.
pub fn default_poly() -> PolyModel {
    PolyModel {
        dim: 1,
        drift: vec![Polynomial {
            terms: vec![(-1.0, vec![1]), (-0.1, vec![3])],
        }],
        noise: vec![vec![Polynomial {
            terms: vec![(1.0, vec![0]), (0.1, vec![1])],
        }]],
    }
}

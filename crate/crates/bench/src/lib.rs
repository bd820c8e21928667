//! Shared workloads for the benchmarks.

use std::sync::Arc;

use bismut_core::field_model::catalog;
use bismut_core::VectorFieldSet;

/// The catalog models at their default parameters, in a fixed order.
pub fn models() -> Vec<(&'static str, Arc<VectorFieldSet>)> {
    vec![
        ("bm", Arc::new(catalog::bm(1))),
        ("ou", Arc::new(catalog::ou(1.0, 1.0))),
        ("gbm", Arc::new(catalog::gbm(0.0, 0.5))),
    ]
}

/// Start point used for `name`.
pub fn start(name: &str) -> Vec<f64> {
    if name == "gbm" {
        vec![1.0]
    } else {
        vec![0.0]
    }
}

use std::sync::Arc;

use bismut_core::field_model::catalog;
use bismut_core::mc_semigroup::{density_estimate, kde, DensityMethod};
use bismut_core::McConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn estimators(c: &mut Criterion) {
    let vfs = Arc::new(catalog::ou(1.0, 1.0));
    let ys: Vec<f64> = (0..81).map(|i| -3.0 + 0.075 * i as f64).collect();
    let cfg = McConfig::new(20_000, 16, 3);
    let mut g = c.benchmark_group("density");
    g.sample_size(10);
    g.bench_function("malliavin_weight", |b| {
        b.iter(|| density_estimate(&vfs, &[0.0], 1.0, &ys, DensityMethod::MalliavinWeight, None, &cfg).unwrap())
    });
    g.bench_function("kde_end_to_end", |b| {
        b.iter(|| density_estimate(&vfs, &[0.0], 1.0, &ys, DensityMethod::Kde, None, &cfg).unwrap())
    });
    for n in [10_000usize, 100_000] {
        let samples: Vec<f64> = (0..n).map(|i| ((i as f64 + 0.5) / n as f64 - 0.5) * 6.0).collect();
        g.bench_with_input(BenchmarkId::new("kde", n), &samples, |b, s| b.iter(|| kde(s, &ys, 0.1)));
    }
    g.finish();
}

criterion_group!(benches, estimators);
criterion_main!(benches);

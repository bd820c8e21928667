use bismut_bench::{models, start};
use bismut_core::pde_oracle::{default_axis, solve_parabolic, Coefficients};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn solve_1d(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_parabolic");
    g.sample_size(10);
    for (name, vfs) in models() {
        let x0 = start(name)[0];
        let coeffs = Coefficients::from_model(vfs.clone());
        for nodes in [201usize, 401] {
            let axis = default_axis(&vfs, x0, 1.0, nodes).unwrap();
            g.bench_with_input(BenchmarkId::new(name, nodes), &axis, |b, axis| {
                b.iter(|| {
                    solve_parabolic(&coeffs, &|p: &[f64]| p[0] * p[0], std::slice::from_ref(axis), 1.0, 200).unwrap()
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, solve_1d);
criterion_main!(benches);

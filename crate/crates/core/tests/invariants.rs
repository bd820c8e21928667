use std::sync::Arc;

use bismut_core::config::{parse_config, ExperimentConfig, ExperimentKind, ModelConfig, RunConfig};
use bismut_core::field_model::{
    build_augmentation, catalog, direction_net, AugmentationSpec, AugmentedSystem, PerturbationSchedule, TestFunction,
};
use bismut_core::identity_suite::Verdict;
use bismut_core::mc_semigroup::{kde, weight_u, weighted_samples, McConfig, Stats};
use bismut_core::pde_oracle::gauss_legendre;
use bismut_core::sde_engine::{simulate_with, SimOptions, TimeGrid};
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = ModelConfig> {
    prop_oneof![
        (1usize..4).prop_map(|dim| ModelConfig::Bm { dim }),
        (-2.0f64..2.0, 0.1f64..3.0).prop_map(|(a, sigma)| ModelConfig::Ou { a, sigma }),
        (-1.0f64..1.0, 0.1f64..1.0).prop_map(|(mu, sigma)| ModelConfig::Gbm { mu, sigma }),
    ]
}

fn experiment_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        0usize..6,
        proptest::option::of(0u64..1_000_000),
        proptest::option::of(1usize..10_000),
        proptest::option::of(0.01f64..5.0),
        proptest::bool::ANY,
        1usize..200,
    )
        .prop_map(|(k, seed, n_paths, t, pde, directions)| {
            let mut e = ExperimentConfig::new(ExperimentKind::ALL[k]);
            e.seed = seed;
            e.n_paths = n_paths;
            e.t = t;
            match e.kind {
                ExperimentKind::QuasiInvariance | ExperimentKind::GradientTransfer => e.pde = pde,
                ExperimentKind::Nondegeneracy => e.directions = directions,
                _ => {}
            }
            e
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        model in model_strategy(),
        experiments in proptest::collection::vec(experiment_strategy(), 1..4),
        seed in 0u64..(i64::MAX as u64),
        n_paths in 1usize..1_000_000,
        t in 1e-3f64..10.0,
        threads in proptest::option::of(1usize..16),
    ) {
        let mut experiments = experiments;
        for (i, e) in experiments.iter_mut().enumerate() {
            e.name = format!("{}_{i}", e.kind.as_str());
        }
        let mut cfg = RunConfig::new(model, experiments);
        cfg.seed = seed;
        cfg.n_paths = n_paths;
        cfg.t = t;
        cfg.threads = threads;
        let text = cfg.to_toml_string();
        let parsed = parse_config(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_toml_string(), text);
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,200}") {
        let _ = parse_config(&text);
    }

    #[test]
    fn verdict_is_symmetric_and_monotone(
        lhs in -10.0f64..10.0,
        rhs in -10.0f64..10.0,
        sigma in 0.0f64..1.0,
        budget in 0.0f64..1.0,
        more in 0.0f64..1.0,
    ) {
        let v = Verdict::compare(lhs, rhs, sigma, budget);
        prop_assert_eq!(v, Verdict::compare(rhs, lhs, sigma, budget));
        if v != Verdict::Fail {
            prop_assert!(Verdict::compare(lhs, rhs, sigma, budget + more) != Verdict::Fail);
        }
    }

    #[test]
    fn girsanov_weight_is_linear_in_its_start(seed in 0u64..1000, u0 in -3.0f64..3.0) {
        let vfs = Arc::new(catalog::ou(1.0, 0.7));
        let spec = AugmentationSpec::girsanov(vfs, PerturbationSchedule::constant(vec![0.4]));
        let cfg = McConfig::new(64, 8, seed);
        let f = TestFunction::coordinate(0);
        let one = weighted_samples(&spec, weight_u, &f, &[0.2], 1.0, 1.0, &cfg).unwrap();
        let scaled = weighted_samples(&spec, weight_u, &f, &[0.2], u0, 1.0, &cfg).unwrap();
        for (a, b) in one.iter().zip(&scaled) {
            prop_assert!((a * u0 - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count(seed in 0u64..10_000, threads in 2usize..5) {
        let sys = build_augmentation(&AugmentationSpec::jacobian(Arc::new(catalog::gbm(0.1, 0.4)))).unwrap();
        let z0 = sys.initial_state(&[1.0]).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let one = SimOptions { threads: Some(1), ..SimOptions::default() };
        let many = SimOptions { threads: Some(threads), ..SimOptions::default() };
        let a = simulate_with(&sys, &z0, &grid, 150, seed, &one).unwrap();
        let b = simulate_with(&sys, &z0, &grid, 150, seed, &many).unwrap();
        prop_assert_eq!(a.terminal_states(), b.terminal_states());
    }

    #[test]
    fn paired_stats_of_identical_samples(xs in proptest::collection::vec(-5.0f64..5.0, 2..50)) {
        let s = Stats::paired(&xs, &xs);
        prop_assert_eq!(s.mean, 0.0);
        prop_assert_eq!(s.stderr, 0.0);
    }

    #[test]
    fn gauss_legendre_is_exact_to_degree_2n_minus_1(n in 1usize..24, a in -2.0f64..0.0, b in 0.1f64..2.0) {
        let rule = gauss_legendre(n, a, b);
        let k = 2 * n - 1;
        let q: f64 = rule.iter().map(|(x, w)| w * x.powi(k as i32)).sum();
        let exact = (b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / (k as f64 + 1.0);
        prop_assert!((q - exact).abs() <= 1e-10 * (1.0 + exact.abs()));
    }

    #[test]
    fn direction_net_is_on_the_sphere(d in 1usize..5, n in 1usize..80) {
        for xi in direction_net(d, n) {
            let norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_is_nonnegative(samples in proptest::collection::vec(-3.0f64..3.0, 1..60), y in -5.0f64..5.0, bw in 0.01f64..2.0) {
        let v = kde(&samples, &[y], bw);
        prop_assert!(v[0] >= 0.0);
    }

    #[test]
    fn unperturbed_system_matches_base(seed in 0u64..1000) {
        let vfs = Arc::new(catalog::ou(1.0, 1.0));
        let base = AugmentedSystem::base_system(vfs.clone());
        let pert = AugmentedSystem::perturbed(vfs, PerturbationSchedule::zero(1)).unwrap();
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let opts = SimOptions::default();
        let a = simulate_with(&base, &[0.3], &grid, 32, seed, &opts).unwrap();
        let b = simulate_with(&pert, &[0.3], &grid, 32, seed, &opts).unwrap();
        prop_assert_eq!(a.terminal_states(), b.terminal_states());
    }
}

use std::sync::Arc;

use bismut_core::field_model::{catalog, PerturbationSchedule, TestFunction};
use bismut_core::identity_suite::{check_bismut, check_quasi_invariance, CheckSetup, Verdict};
use bismut_core::mc_semigroup::{estimate_gradient, estimate_perturbed, estimate_semigroup, McConfig};

fn within(value: f64, exact: f64, stderr: f64, slack: f64) -> bool {
    (value - exact).abs() <= 4.0 * stderr + slack
}

#[test]
fn ou_mean_under_constant_drift_shift() {
    let (a, sigma, h, x, t) = (1.0f64, 0.8, 0.5, 0.2, 1.0);
    let vfs = Arc::new(catalog::ou(a, sigma));
    let est = estimate_perturbed(
        &vfs,
        &PerturbationSchedule::constant(vec![h]),
        &TestFunction::coordinate(0),
        &[x],
        t,
        &McConfig::new(40_000, 64, 11),
    )
    .unwrap();
    let exact = x * (-a * t).exp() + sigma * h * (1.0 - (-a * t).exp()) / a;
    assert!(
        within(est.scalar(), exact, est.scalar_stderr(), 2e-3),
        "{} vs {exact}",
        est.scalar()
    );
}

#[test]
fn ou_second_moment() {
    let (a, sigma, x, t) = (0.7f64, 1.3, -0.4, 0.8);
    let vfs = Arc::new(catalog::ou(a, sigma));
    let est = estimate_semigroup(&vfs, &TestFunction::square(0), &[x], t, &McConfig::new(40_000, 64, 5)).unwrap();
    let m = x * (-a * t).exp();
    let v = sigma * sigma * (1.0 - (-2.0 * a * t).exp()) / (2.0 * a);
    assert!(within(est.scalar(), m * m + v, est.scalar_stderr(), 5e-3));
}

#[test]
fn gbm_gradient_of_mean() {
    let (mu, sigma, x, t) = (0.1f64, 0.4, 1.5, 1.0);
    let vfs = Arc::new(catalog::gbm(mu, sigma));
    let est = estimate_gradient(
        &vfs,
        &TestFunction::coordinate(0),
        &[x],
        t,
        &McConfig::new(40_000, 64, 3),
    )
    .unwrap();
    let exact = ((mu + 0.5 * sigma * sigma) * t).exp();
    assert!(
        within(est.scalar(), exact, est.scalar_stderr(), 5e-3),
        "{} vs {exact}",
        est.scalar()
    );
}

#[test]
fn ou_gradient_of_second_moment() {
    let (a, x, t) = (1.0f64, 0.6, 0.5);
    let vfs = Arc::new(catalog::ou(a, 1.0));
    let est = estimate_gradient(&vfs, &TestFunction::square(0), &[x], t, &McConfig::new(20_000, 32, 9)).unwrap();
    let exact = 2.0 * x * (-2.0 * a * t).exp();
    assert!(within(est.scalar(), exact, est.scalar_stderr(), 2e-3));
}

#[test]
fn zero_perturbation_passes_trivially() {
    let setup = CheckSetup::new("zero", catalog::bm(1), vec![0.0], 1.0, McConfig::new(2000, 16, 1)).with_pde(None);
    let reports = check_quasi_invariance(
        &setup,
        &PerturbationSchedule::zero(1),
        &[TestFunction::coordinate(0), TestFunction::square(0)],
    )
    .unwrap();
    for r in &reports {
        assert_eq!(r.verdict, Verdict::Pass, "{}", r.summary_line());
        assert!((r.lhs - r.rhs).abs() < 1e-12);
    }
}

#[test]
fn bismut_on_linear_function_of_bm() {
    let setup = CheckSetup::new("b", catalog::bm(1), vec![0.3], 1.0, McConfig::new(40_000, 16, 21));
    let reports = check_bismut(&setup, &[TestFunction::coordinate(0)]).unwrap();
    assert_eq!(reports.len(), 1);
    assert!((reports[0].lhs - 1.0).abs() < 1e-12);
    assert_ne!(reports[0].verdict, Verdict::Fail, "{}", reports[0].summary_line());
}

//! Each check, run with a mismatched model on one side, has to fail.

use bismut_core::field_model::{catalog, PerturbationSchedule, TestFunction};
use bismut_core::identity_suite::{
    check_bismut, check_density, check_elementary_ibp, check_gradient_transfer, check_nondegeneracy,
    check_quasi_invariance, default_density_grid, CheckSetup, ExperimentReport,
};
use bismut_core::{McConfig, Verdict};

fn setup(
    model: bismut_core::VectorFieldSet,
    control: bismut_core::VectorFieldSet,
    x: Vec<f64>,
    n_paths: usize,
) -> CheckSetup {
    CheckSetup::new("control", model, x, 1.0, McConfig::new(n_paths, 16, 17))
        .with_control(control)
        .with_pde(None)
}

fn assert_all_fail(reports: &[ExperimentReport]) {
    assert!(!reports.is_empty());
    for r in reports {
        assert_eq!(r.verdict, Verdict::Fail, "{}", r.summary_line());
        assert!(r.model.contains("control"));
    }
}

#[test]
fn quasi_invariance() {
    let s = setup(catalog::bm(1), catalog::ou(1.0, 1.0), vec![0.5], 20_000);
    let r = check_quasi_invariance(
        &s,
        &PerturbationSchedule::constant(vec![0.5]),
        &[TestFunction::coordinate(0)],
    );
    assert_all_fail(&r.unwrap());
}

#[test]
fn elementary_ibp() {
    let s = setup(catalog::bm(1), catalog::ou(1.0, 1.0), vec![1.0], 20_000);
    let r = check_elementary_ibp(
        &s,
        &PerturbationSchedule::constant(vec![1.0]),
        &[TestFunction::square(0)],
        16,
    );
    assert_all_fail(&r.unwrap());
}

#[test]
fn gradient_transfer() {
    let s = setup(catalog::ou(1.0, 1.0), catalog::gbm(0.0, 0.5), vec![1.0], 20_000);
    assert_all_fail(&check_gradient_transfer(&s, &[TestFunction::coordinate(0)], 1e-3).unwrap());
}

#[test]
fn bismut() {
    // Resolved steps: at coarse steps the discretization budget is as large as the mismatch.
    let mut s = setup(catalog::ou(1.0, 1.0), catalog::bm(1), vec![0.0], 20_000);
    s.mc = s.mc.with_steps(256);
    assert_all_fail(&check_bismut(&s, &[TestFunction::coordinate(0)]).unwrap());
}

#[test]
fn nondegeneracy() {
    let s = setup(catalog::bm(2), catalog::degenerate_plane(), vec![0.0, 0.0], 4_000);
    assert_all_fail(&[check_nondegeneracy(&s, &[1.0, 2.0], None, 16).unwrap()]);
}

#[test]
fn density() {
    let model = catalog::ou(1.0, 1.0);
    let ys = default_density_grid(&model, 0.0, 1.0, 41, 4.0).unwrap();
    let s =
        CheckSetup::new("control", model, vec![0.0], 1.0, McConfig::new(100_000, 1, 17)).with_control(catalog::bm(1));
    assert_all_fail(&[check_density(&s, &ys, 0.03, 0.03).unwrap()]);
}

//! Acceptance criteria 1–9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. `ACCEPTANCE_ONLY=2,5` runs a subset.

use std::error::Error;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use bismut_core::config::{parse_config, ExperimentConfig, ExperimentKind, ModelConfig, RunConfig, SELFCHECK_CONFIG};
use bismut_core::field_model::{
    build_augmentation, catalog, AugmentationSpec, PerturbationSchedule, TestFunction, VectorFieldSet,
};
use bismut_core::identity_suite::{
    check_bismut, check_density, check_elementary_ibp, check_gradient_transfer, check_nondegeneracy,
    check_quasi_invariance, default_density_grid, default_start, run_suite, write_artifacts, CheckSetup,
    ExperimentReport, Verdict,
};
use bismut_core::mc_semigroup::{bismut_pair, estimate_gradient, McConfig};
use bismut_core::pde_oracle::{default_axis, solve_parabolic, Axis, Coefficients};
use bismut_core::sde_engine::{simulate_with, variation_of_constants_residual, SimOptions, TimeGrid};

type Outcome = Result<(bool, String), Box<dyn Error>>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn dictionary(center: f64) -> Vec<TestFunction> {
    TestFunction::DICTIONARY
        .iter()
        .map(|n| TestFunction::dictionary(n, 0, center).unwrap())
        .collect()
}

fn channel_verdicts(r: &ExperimentReport) -> Vec<(String, Verdict)> {
    r.details["channels"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|c| {
                    let v = match c["verdict"].as_str() {
                        Some("pass") => Verdict::Pass,
                        Some("inconclusive") => Verdict::Inconclusive,
                        _ => Verdict::Fail,
                    };
                    (c["name"].as_str().unwrap_or("").to_string(), v)
                })
                .collect()
        })
        .unwrap_or_default()
}

fn worst(reports: &[ExperimentReport]) -> String {
    reports
        .iter()
        .filter(|r| r.verdict != Verdict::Pass)
        .map(|r| format!("{} {}", r.experiment, r.verdict.as_str()))
        .collect::<Vec<_>>()
        .join("; ")
}

fn quasi_invariance() -> Outcome {
    let start = Instant::now();
    let (mut cells, mut agree, mut grid_cells, mut grid_agree, mut inconclusive) = (0, 0, 0, 0, 0);
    let mut misses = Vec::new();
    let models = [catalog::bm(1), catalog::ou(1.0, 1.0), catalog::gbm(0.0, 0.5)];
    for (i, model) in models.into_iter().enumerate() {
        let x = default_start(&model);
        let center = x[0] + 0.5;
        let setup = CheckSetup::new(
            format!("quasi_invariance_{}", model.name()),
            model,
            x,
            1.0,
            McConfig::new(200_000, 64, 101 + i as u64),
        );
        for h in [
            PerturbationSchedule::zero(1),
            PerturbationSchedule::constant(vec![0.5]),
            PerturbationSchedule::sine(1, 0.5, 1.0),
        ] {
            for r in check_quasi_invariance(&setup, &h, &dictionary(center))? {
                for (name, v) in channel_verdicts(&r) {
                    let ok = v != Verdict::Fail;
                    if v == Verdict::Inconclusive {
                        inconclusive += 1;
                    }
                    if !ok {
                        misses.push(format!("{} [{name}]", r.experiment));
                    }
                    if name == "perturbed_vs_weighted" {
                        cells += 1;
                        agree += ok as usize;
                    } else {
                        grid_cells += 1;
                        grid_agree += ok as usize;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let frac = agree as f64 / cells as f64;
    let grid_frac = grid_agree as f64 / grid_cells as f64;
    let pass = frac >= 0.95 && grid_frac >= 0.95 && secs < 120.0;
    Ok((
        pass,
        format!(
            "MC cells {agree}/{cells}, grid cells {grid_agree}/{grid_cells} within tolerance (need 95%), {inconclusive} inconclusive, {secs:.1}s (< 120s){}",
            if misses.is_empty() { String::new() } else { format!("; misses: {}", misses.join(", ")) }
        ),
    ))
}

fn elementary_ibp() -> Outcome {
    let mut all = Vec::new();
    let mut closed = Vec::new();
    let mut pass = true;
    for (i, model) in [catalog::bm(1), catalog::ou(1.0, 1.0)].into_iter().enumerate() {
        let name = model.name().to_string();
        let setup = CheckSetup::new(
            format!("elementary_ibp_{name}"),
            model,
            vec![1.0],
            1.0,
            McConfig::new(1_000_000, 64, 201 + i as u64),
        );
        for c in [0.5, 1.0] {
            let h = PerturbationSchedule::constant(vec![c]);
            let reports =
                check_elementary_ibp(&setup, &h, &[TestFunction::coordinate(0), TestFunction::square(0)], 16)?;
            if name == "bm" {
                // x = 1, t = 1: the derivative of E[(x + w_t + ct)²] in c at 0 is 2xt.
                let exact = 2.0 * c;
                let rel = (reports[1].rhs - exact).abs() / exact;
                let rel_lhs = (reports[1].lhs - exact).abs() / exact;
                pass &= rel < 0.01 && rel_lhs < 0.01;
                closed.push(format!("c={c}: rel err MC {rel:.2e}, quadrature {rel_lhs:.2e}"));
            }
            all.extend(reports);
        }
    }
    let ok = all.iter().filter(|r| r.verdict != Verdict::Fail).count();
    pass &= ok == all.len();
    Ok((
        pass,
        format!(
            "{ok}/{} cells within 3σ + budget; BM x² closed form 2cxt (< 1%): {}{}",
            all.len(),
            closed.join(", "),
            if ok == all.len() {
                String::new()
            } else {
                format!("; {}", worst(&all))
            }
        ),
    ))
}

fn gradient_transfer() -> Outcome {
    let mut all = Vec::new();
    let models = [
        catalog::bm(1),
        catalog::ou(1.0, 1.0),
        catalog::gbm(0.0, 0.5),
        catalog::poly(&catalog::default_poly())?,
    ];
    for (i, model) in models.into_iter().enumerate() {
        let x = default_start(&model);
        let center = x[0] + 0.5;
        let setup = CheckSetup::new(
            format!("gradient_transfer_{}", model.name()),
            model,
            x,
            1.0,
            McConfig::new(20_000, 64, 301 + i as u64),
        );
        all.extend(check_gradient_transfer(&setup, &dictionary(center), 1e-3)?);
    }
    let ok = all.iter().filter(|r| r.verdict != Verdict::Fail).count();
    let steps = 64;
    let ou = Arc::new(catalog::ou(1.0, 1.0));
    let e = estimate_gradient(
        &ou,
        &TestFunction::coordinate(0),
        &[0.0],
        1.0,
        &McConfig::new(1_000, steps, 7),
    )?;
    let err = (e.scalar() - (-1.0f64).exp()).abs();
    let bound = 10.0 / steps as f64;
    let pass = ok == all.len() && err < bound;
    Ok((
        pass,
        format!(
            "{ok}/{} cells (bm, ou, gbm, poly × dictionary) within 3σ + budget; OU |DP_t x − e^-t| = {err:.2e} < 10·step = {bound:.2e}{}",
            all.len(),
            if ok == all.len() { String::new() } else { format!("; {}", worst(&all)) }
        ),
    ))
}

fn bismut_identity() -> Outcome {
    let f = [TestFunction::coordinate(0)];
    let ou = CheckSetup::new(
        "bismut_ou",
        catalog::ou(1.0, 1.0),
        vec![0.0],
        1.0,
        McConfig::new(200_000, 512, 401),
    );
    let r = check_bismut(&ou, &f)?.remove(0);
    let diff = r.details["difference"].as_f64().unwrap_or(f64::NAN);
    let ou_contains = diff.abs() <= 3.0 * r.sigma;

    // U V is path-independent for OU; its Euler error is measured on a coupled half-step run.
    let vfs = Arc::new(catalog::ou(1.0, 1.0));
    let cfg = McConfig::new(1_000, 512, 402);
    let fine = bismut_pair(&vfs, &f[0], &[0.0], 1.0, &cfg)?.lhs.scalar();
    let coarse = bismut_pair(&vfs, &f[0], &[0.0], 1.0, &cfg.coarsened().unwrap())?
        .lhs
        .scalar();
    let sinh = 1f64.sinh();
    let lhs_budget = 2.0 * (fine - coarse).abs();
    let lhs_ok = (r.lhs - sinh).abs() <= lhs_budget;

    let gbm = CheckSetup::new(
        "bismut_gbm",
        catalog::gbm(0.0, 0.5),
        vec![1.0],
        1.0,
        McConfig::new(200_000, 256, 403),
    );
    let g = check_bismut(&gbm, &f)?.remove(0);
    let gdiff = g.details["difference"].as_f64().unwrap_or(f64::NAN);
    let gbm_contains = gdiff.abs() <= 3.0 * g.sigma;
    Ok((
        ou_contains && lhs_ok && gbm_contains,
        format!(
            "OU lhs {:.5} vs sinh(1) {sinh:.5} (|err| {:.1e} ≤ discretization {lhs_budget:.1e}), paired diff {diff:.2e} ± 3σ {:.2e}; GBM paired diff {gdiff:.2e} ± 3σ {:.2e}",
            r.lhs,
            (r.lhs - sinh).abs(),
            3.0 * r.sigma,
            3.0 * g.sigma
        ),
    ))
}

fn variation_of_constants() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for model in [catalog::bm(1), catalog::ou(1.0, 1.0), catalog::gbm(0.0, 0.5)] {
        let name = model.name().to_string();
        // With additive noise U is path-independent and the residual is the
        // trapezoid error of a smooth integrand, O(step²); multiplicative
        // noise puts it in the O(step) regime.
        let additive = model.affine_additive_coefficients().is_some();
        let x = default_start(&model);
        let sys = build_augmentation(&AugmentationSpec::malliavin(Arc::new(model)))?;
        let z0 = sys.initial_state(&x)?;
        let opts = SimOptions {
            record_trajectories: true,
            ..SimOptions::default()
        };
        let (mut maxima, mut means) = (Vec::new(), Vec::new());
        for steps in [256usize, 512] {
            let grid = TimeGrid::new(1.0, steps)?;
            let ens = simulate_with(&sys, &z0, &grid, 2_000, 501, &opts)?;
            let res: Vec<f64> = variation_of_constants_residual(&ens)?
                .into_iter()
                .filter(|v| !v.is_nan())
                .collect();
            let max = res.iter().copied().fold(0.0, f64::max);
            pass &= max < 10.0 / steps as f64;
            maxima.push(max);
            means.push(res.iter().sum::<f64>() / res.len() as f64);
        }
        let ratio = means[0] / means[1];
        let exact = maxima[1] < 1e-12;
        let line = if exact {
            format!(
                "{name}: max residual {:.1e}/{:.1e} (exact to rounding)",
                maxima[0], maxima[1]
            )
        } else if additive {
            pass &= ratio >= 3.2;
            format!(
                "{name}: max residual {:.2e}/{:.2e} < 10·step, mean ratio {ratio:.2} (O(step²) quadrature regime, ≥ 3.2)",
                maxima[0], maxima[1]
            )
        } else {
            pass &= (1.7..=2.3).contains(&ratio);
            format!(
                "{name}: max residual {:.2e}/{:.2e} < 10·step, mean ratio {ratio:.2} (O(step) regime, [1.7, 2.3])",
                maxima[0], maxima[1]
            )
        };
        parts.push(line);
    }
    Ok((pass, format!("n_steps 256/512: {}", parts.join("; "))))
}

fn nondegeneracy() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    let exps = [1.0, 2.0, 4.0];
    for (i, model) in [catalog::bm(1), catalog::ou(1.0, 1.0)].into_iter().enumerate() {
        let name = model.name().to_string();
        let setup = CheckSetup::new(
            format!("nondegeneracy_{name}"),
            model,
            vec![0.0],
            1.0,
            McConfig::new(20_000, 64, 601 + i as u64),
        );
        let r = check_nondegeneracy(&setup, &exps, None, 64)?;
        let closed = r.details["closed_form"].as_array().map_or(0, |a| a.len());
        pass &= r.verdict == Verdict::Pass && closed == exps.len();
        parts.push(format!("{name} {} ({closed} closed-form moments)", r.verdict.as_str()));
    }
    let gbm = CheckSetup::new(
        "nondegeneracy_gbm",
        catalog::gbm(0.0, 0.5),
        vec![1.0],
        1.0,
        McConfig::new(20_000, 64, 603),
    );
    let g = check_nondegeneracy(&gbm, &exps, None, 64)?;
    let slope_ok = g.lhs >= 5.0;
    pass &= slope_ok;
    parts.push(format!("gbm min slope {} (≥ 5)", g.details["min_slope"]));
    let deg = CheckSetup::new(
        "nondegeneracy_plane",
        catalog::degenerate_plane(),
        vec![0.0, 0.0],
        1.0,
        McConfig::new(2_000, 32, 604),
    );
    let d = check_nondegeneracy(&deg, &exps, None, 64)?;
    pass &= d.verdict == Verdict::Fail;
    parts.push(format!(
        "degenerate plane {} (singular fraction {})",
        d.verdict.as_str(),
        d.details["singular_fraction"]
    ));
    Ok((pass, parts.join("; ")))
}

fn density() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, (model, steps)) in [(catalog::bm(1), 1usize), (catalog::ou(1.0, 1.0), 128)]
        .into_iter()
        .enumerate()
    {
        let name = model.name().to_string();
        let ys = default_density_grid(&model, 0.0, 1.0, 81, 4.0).unwrap();
        let setup = CheckSetup::new(
            format!("density_{name}"),
            model,
            vec![0.0],
            1.0,
            McConfig::new(1_000_000, steps, 701 + i as u64),
        );
        let r = check_density(&setup, &ys, 0.01, 0.02)?;
        pass &= r.verdict == Verdict::Pass;
        parts.push(format!(
            "{name}: weight sup err {:.2e} (< 0.01), KDE sup err {:.2e} (< 0.02)",
            r.lhs, r.rhs
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn determinism_config() -> RunConfig {
    let kinds = [
        (ExperimentKind::QuasiInvariance, ModelConfig::Ou { a: 1.0, sigma: 1.0 }),
        (ExperimentKind::ElementaryIbp, ModelConfig::Ou { a: 1.0, sigma: 1.0 }),
        (
            ExperimentKind::GradientTransfer,
            ModelConfig::Gbm { mu: 0.0, sigma: 0.5 },
        ),
        (ExperimentKind::Bismut, ModelConfig::Poly(catalog::default_poly())),
        (
            ExperimentKind::Nondegeneracy,
            ModelConfig::Poly(catalog::default_poly()),
        ),
        (ExperimentKind::Density, ModelConfig::Ou { a: 1.0, sigma: 1.0 }),
    ];
    let experiments = kinds
        .into_iter()
        .map(|(k, m)| {
            let mut e = ExperimentConfig::new(k);
            e.model = Some(m);
            e.pde_nodes = 101;
            e.pde_steps = 25;
            e
        })
        .collect();
    let mut cfg = RunConfig::new(ModelConfig::Bm { dim: 1 }, experiments);
    cfg.n_paths = 3_000;
    cfg.n_steps = 16;
    cfg
}

/// `report.json` as written for `cfg`, without the wall-clock field.
fn written_report(cfg: &RunConfig, tag: &str) -> Result<String, Box<dyn Error>> {
    let dir = std::env::temp_dir().join(format!("bismut-acceptance-{}-{tag}", std::process::id()));
    write_artifacts(&dir, cfg, &run_suite(cfg)?)?;
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json"))?)?;
    std::fs::remove_dir_all(&dir)?;
    for r in v["reports"].as_array_mut().ok_or("report.json has no reports")? {
        r.as_object_mut().ok_or("report is not an object")?.remove("runtime_ms");
    }
    Ok(serde_json::to_string_pretty(&v)?)
}

fn determinism() -> Outcome {
    let mut cfg = determinism_config();
    cfg.threads = Some(1);
    let one = written_report(&cfg, "t1")?;
    cfg.threads = Some(4);
    let four = written_report(&cfg, "t4")?;
    let identical = one == four;

    let self_cfg = parse_config(SELFCHECK_CONFIG)?;
    let start = Instant::now();
    let outcome = run_suite(&self_cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = identical && secs < 60.0 && outcome.exit_code() == 0;
    Ok((
        pass,
        format!(
            "reports with 1 and 4 workers {} ({} bytes); selfcheck {} in {secs:.1}s (< 60s){}",
            if identical {
                "byte-identical apart from runtime_ms"
            } else {
                "DIFFER"
            },
            one.len(),
            if outcome.exit_code() == 0 { "passes" } else { "fails" },
            if outcome.exit_code() == 0 {
                String::new()
            } else {
                format!("; {}", worst(&outcome.reports))
            }
        ),
    ))
}

fn value_at(
    coeffs: &Coefficients,
    f: &TestFunction,
    axis: &Axis,
    x0: f64,
    steps: usize,
) -> Result<f64, Box<dyn Error>> {
    Ok(solve_parabolic(coeffs, &|p| f.eval(p), std::slice::from_ref(axis), 1.0, steps)?.interpolate(&[x0])?)
}

fn pde_convergence() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    let models: Vec<VectorFieldSet> = vec![
        catalog::bm(1),
        catalog::ou(1.0, 1.0),
        catalog::gbm(0.0, 0.5),
        catalog::poly(&catalog::default_poly())?,
    ];
    for model in models {
        let name = model.name().to_string();
        let x0 = default_start(&model)[0];
        let f = TestFunction::bump(0, x0 + 0.25);
        let axis = default_axis(&model, x0, 1.0, 201)?;
        let coeffs = Coefficients::from_model(Arc::new(model));
        let (a1, a2) = (axis.refined(), axis.refined().refined());
        let v0 = value_at(&coeffs, &f, &axis, x0, 50)?;
        let v1 = value_at(&coeffs, &f, &a1, x0, 100)?;
        let v2 = value_at(&coeffs, &f, &a2, x0, 200)?;
        let ratio = (v0 - v1) / (v1 - v2);
        pass &= (3.2..=4.8).contains(&ratio);
        parts.push(format!("{name} {ratio:.2}"));
    }
    Ok((
        pass,
        format!("mesh-halving ratios {} (window [3.2, 4.8])", parts.join(", ")),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "quasi-invariance", quasi_invariance),
        (2, "elementary integration by parts", elementary_ibp),
        (3, "gradient transfer", gradient_transfer),
        (4, "Bismut identity", bismut_identity),
        (5, "variation of constants", variation_of_constants),
        (6, "nondegeneracy", nondegeneracy),
        (7, "density", density),
        (8, "determinism", determinism),
        (9, "grid oracle convergence", pde_convergence),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, msg) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += !pass as usize;
        println!(
            "criterion {id} {} {name}: {msg} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

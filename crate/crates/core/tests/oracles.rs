use std::path::PathBuf;

use hmcert::certify::{
    fit_drift, fit_minorization, fit_r_step, hm_constants_default, smallest_uniform_r, RStepOptions,
    DEFAULT_RADIUS_MARGIN,
};
use hmcert::error::Error;
use hmcert::io::load_model;
use hmcert::lipschitz::{estimate_kernel_lipschitz, l_p_prime};
use hmcert::models::{build_r_step_example, build_two_state_family};
use hmcert::norms::WeightParam;
use hmcert::pipeline::{certify_bundle, Context, Route, RunConfig};
use hmcert::poisson::{invariant_measure, k_u, poisson_direct, series_terms};
use hmcert::statespace::{Lyapunov, Measure, PairMode, Weights};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn grid(points: usize) -> Vec<Vec<f64>> {
    (0..points).map(|i| vec![i as f64 / (points - 1) as f64]).collect()
}

#[test]
fn two_state_drift_is_tight() {
    // P*V = (p, 1 - q) for V = (0, 1); the best envelope sits at the largest p.
    let g = load_model(&configs().join("two_state_model.toml")).unwrap();
    let d = fit_drift(&g.family, &g.v).unwrap();
    assert!((d.gamma - 0.65).abs() < 1e-9, "gamma {}", d.gamma);
    assert!((d.k - 0.15).abs() < 1e-9, "K {}", d.k);
    assert!((d.stationary_bound() - 0.15 / 0.35).abs() < 1e-9);
}

#[test]
fn two_state_poisson_matches_closed_form() {
    let ts = build_two_state_family(
        &grid(5),
        |t| 0.1 + 0.05 * t[0],
        |t| 0.2 - 0.04 * t[0],
        |t| [1.0, 2.0 + t[0]],
    )
    .unwrap();
    let v = Lyapunov::new(vec![0.0, 1.0]).unwrap();
    let beta = WeightParam::new(0.5).unwrap();
    for t in 0..5 {
        let k = ts.family.kernel(t);
        let mu = invariant_measure(k, &v, beta, 1e-12).unwrap();
        let expect = ts.mu_star(t);
        assert!((mu.mu_star.weights()[0] - expect[0]).abs() < 1e-10);
        let m = Measure::probability(expect.to_vec()).unwrap();
        let sol = poisson_direct(k, ts.family.observable(t), &v, beta, &m).unwrap();
        assert!((sol.h - ts.h(t)).abs() < 1e-12);
        let u = ts.u(t);
        for (a, b) in sol.u.values().iter().zip(u) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn frozen_two_state_values() {
    let ts = build_two_state_family(&[vec![0.0]], |_| 0.1, |_| 0.2, |_| [1.0, 2.0]).unwrap();
    assert_eq!(ts.mu_star(0), [2.0 / 3.0, 1.0 / 3.0]);
    assert!((ts.h(0) - 4.0 / 3.0).abs() < 1e-15);
    let u = ts.u(0);
    assert!((u[0] + 1.0 / 0.9).abs() < 1e-12);
    assert!((u[1] - 2.0 / 0.9).abs() < 1e-12);
}

#[test]
fn periodic_swap_has_no_minorization() {
    let g = load_model(&configs().join("periodic_model.toml")).unwrap();
    let d = fit_drift(&g.family, &g.v).unwrap();
    let e = fit_minorization(&g.family, &g.v, &d, d.default_radius(DEFAULT_RADIUS_MARGIN)).unwrap_err();
    assert!(
        matches!(e, Error::ZeroMinorization | Error::EmptySmallSet { .. }),
        "{e}"
    );
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn r_step_example_needs_two_steps() {
    let g = build_r_step_example(&grid(6)).unwrap();
    assert!(fit_drift(&g.family, &g.v).is_err());
    let cert = fit_r_step(&g.family, &g.v, RStepOptions::default()).unwrap();
    assert_eq!(cert.r, 2);
    assert!(cert.alpha < 1.0 && cert.alpha > 0.0);
    assert!((cert.alpha - cert.alpha_r.sqrt()).abs() < 1e-12);
}

#[test]
fn uniform_r_from_individual_drift() {
    assert_eq!(smallest_uniform_r(0.8, 4.0), Some(7));
    assert_eq!(smallest_uniform_r(0.5, 1.0), Some(1));
    assert_eq!(smallest_uniform_r(0.5, 2.0), Some(2));
    assert_eq!(smallest_uniform_r(1.0, 2.0), None);
}

#[test]
fn closed_form_constants() {
    // (2 + 0.5 * 1 / 0.5) / 0.5
    assert!((k_u(0.5, 0.5, 1.0, 0.5) - 6.0).abs() < 1e-15);
    // scale = 1 * (2 + 0 + 0) / 0.5 = 4, N = floor(ln(1e-3 / 4) / ln 0.5) + 1 = 12
    assert_eq!(series_terms(1.0, 0.5, 0.0, 0.0, 0.0, 1e-3), Some(12));
    assert_eq!(series_terms(0.0, 0.5, 1.0, 1.0, 1.0, 1e-3), Some(0));
}

#[test]
fn hm_constants_on_two_state_file() {
    let g = load_model(&configs().join("two_state_model.toml")).unwrap();
    let d = fit_drift(&g.family, &g.v).unwrap();
    let m = fit_minorization(&g.family, &g.v, &d, d.default_radius(DEFAULT_RADIUS_MARGIN)).unwrap();
    let cc = hm_constants_default(&d, &m).unwrap();
    assert!(cc.alpha < 1.0 && cc.alpha > cc.gamma);
    assert!((cc.beta - cc.alpha0 / cc.k_used).abs() < 1e-15);
    assert!(cc.alpha >= cc.alpha_minorization_branch.max(cc.alpha_drift_branch) - 1e-15);
    let lpp = l_p_prime(&cc, &d);
    assert!((lpp - (1.0 + cc.beta * 0.15 / 0.35) / (1.0 - cc.alpha)).abs() < 1e-9);
}

#[test]
fn kernel_lipschitz_of_affine_rows() {
    let g = load_model(&configs().join("two_state_model.toml")).unwrap();
    let beta = WeightParam::new(1.0).unwrap();
    // Row 0 moves by (-0.05, 0.05) per unit theta; weights (1, 2) give 0.05 + 0.1.
    let (l, w) = estimate_kernel_lipschitz(&g.family, &g.v, beta, PairMode::All).unwrap();
    assert!((l - 0.15).abs() < 1e-12, "{l}");
    assert_eq!(w.unwrap().state, Some(0));
    let (adj, _) = estimate_kernel_lipschitz(&g.family, &g.v, beta, PairMode::Adjacent).unwrap();
    assert!((l - adj).abs() < 1e-12);
}

#[test]
fn repo_configs_certify() {
    for (file, route) in [("example.toml", Route::OneStep), ("r_step.toml", Route::RStep)] {
        let mut cfg = RunConfig::load(&configs().join(file)).unwrap();
        cfg.output.cache = false;
        let ctx = Context::new(cfg).unwrap();
        let b = certify_bundle(&ctx).unwrap();
        assert_eq!(b.route, route, "{file}");
    }
}

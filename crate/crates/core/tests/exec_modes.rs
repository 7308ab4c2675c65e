use hmcert::certify::{
    check_measure_contraction, fit_drift, fit_minorization, hm_constants_default, DEFAULT_RADIUS_MARGIN,
};
use hmcert::exec::{self, Mode};
use hmcert::lipschitz::estimate_kernel_lipschitz;
use hmcert::models::build_random_minorized_family;
use hmcert::statespace::PairMode;

#[test]
fn map_indexed_keeps_index_order() {
    for mode in [Mode::Sequential, Mode::Parallel] {
        let out = exec::with_mode(mode, || exec::map_indexed(1000, |i| i * i));
        assert!(out.iter().enumerate().all(|(i, &x)| x == i * i));
    }
}

#[test]
fn try_map_returns_first_error_by_index() {
    let r: Result<Vec<usize>, usize> = exec::try_map_indexed(100, |i| if i % 30 == 29 { Err(i) } else { Ok(i) });
    assert_eq!(r, Err(29));
}

#[test]
fn checks_agree_across_modes() {
    let grid: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 / 8.0]).collect();
    let r = build_random_minorized_family(15, &grid, 7, 0.3).unwrap();
    let d = fit_drift(&r.family, &r.v).unwrap();
    let m = fit_minorization(&r.family, &r.v, &d, d.default_radius(DEFAULT_RADIUS_MARGIN)).unwrap();
    let cc = hm_constants_default(&d, &m).unwrap();
    let run = || {
        let c = check_measure_contraction(&r.family, &r.v, &cc, 300, 11).unwrap();
        let l = estimate_kernel_lipschitz(&r.family, &r.v, cc.weight(), PairMode::All)
            .unwrap()
            .0;
        (c.worst_ratio.to_bits(), c.worst_theta_index, l.to_bits())
    };
    let seq = exec::sequential(run);
    let par = exec::with_mode(Mode::Parallel, run);
    let pooled = exec::with_workers(Some(3), run);
    assert_eq!(seq, par);
    assert_eq!(seq, pooled);
}

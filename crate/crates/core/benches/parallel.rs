use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hmcert::certify::{
    check_function_contraction, check_measure_contraction, fit_drift, fit_minorization, hm_constants_default,
    ContractionConstants, DEFAULT_RADIUS_MARGIN,
};
use hmcert::exec::{self, Mode};
use hmcert::lipschitz::estimate_kernel_lipschitz;
use hmcert::models::{build_random_minorized_family, RandomFamily};
use hmcert::poisson::invariant_measure;
use hmcert::statespace::PairMode;

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn fixture(states: usize, points: usize) -> (RandomFamily, ContractionConstants) {
    let grid: Vec<Vec<f64>> = (0..points).map(|i| vec![i as f64 / (points - 1) as f64]).collect();
    let r = build_random_minorized_family(states, &grid, 3, 0.3).unwrap();
    let d = fit_drift(&r.family, &r.v).unwrap();
    let m = fit_minorization(&r.family, &r.v, &d, d.default_radius(DEFAULT_RADIUS_MARGIN)).unwrap();
    let cc = hm_constants_default(&d, &m).unwrap();
    (r, cc)
}

fn contraction(c: &mut Criterion) {
    let mut g = c.benchmark_group("contraction_check");
    g.sample_size(10);
    for (states, points) in [(20, 16), (60, 32)] {
        let (r, cc) = fixture(states, points);
        for (name, mode) in MODES {
            g.bench_with_input(
                BenchmarkId::new(name, format!("{states}x{points}")),
                &mode,
                |b, &mode| {
                    b.iter(|| {
                        exec::with_mode(mode, || {
                            let f = check_function_contraction(&r.family, &r.v, &cc, 200, 1).unwrap();
                            let m = check_measure_contraction(&r.family, &r.v, &cc, 200, 1).unwrap();
                            black_box((f.worst_ratio, m.worst_ratio))
                        })
                    })
                },
            );
        }
    }
    g.finish();
}

fn lipschitz_all_pairs(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_lipschitz_all_pairs");
    g.sample_size(10);
    let (r, cc) = fixture(40, 48);
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                exec::with_mode(mode, || {
                    black_box(
                        estimate_kernel_lipschitz(&r.family, &r.v, cc.weight(), PairMode::All)
                            .unwrap()
                            .0,
                    )
                })
            })
        });
    }
    g.finish();
}

fn invariant_measures(c: &mut Criterion) {
    let mut g = c.benchmark_group("invariant_measures");
    g.sample_size(10);
    let (r, cc) = fixture(80, 32);
    for (name, mode) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                exec::with_mode(mode, || {
                    exec::map_indexed(r.family.grid_len(), |t| {
                        invariant_measure(r.family.kernel(t), &r.v, cc.weight(), 1e-12)
                            .unwrap()
                            .iterations
                    })
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, contraction, lipschitz_all_pairs, invariant_measures);
criterion_main!(benches);

//! Seeded random test inputs for the empirical checks.
//!
//! Each (seed, stream) pair gets its own ChaCha stream, so checks run per grid
//! point in parallel still draw exactly the same inputs as a sequential run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Function with entries uniform on `[-1, 1]`, optionally scaled by `scale`.
pub fn observable(rng: &mut impl Rng, n: usize, scale: Option<&[f64]>) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            scale.map_or(u, |s| u * s[i])
        })
        .collect()
}

/// Probability vector; every fourth draw is a point mass.
pub fn probability(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    if rng.random_range(0..4) == 0 {
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        return p;
    }
    let mut p: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Signed vector with zero total mass.
pub fn zero_mass(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mean = e.iter().sum::<f64>() / n as f64;
    e.iter_mut().for_each(|x| *x -= mean);
    e
}

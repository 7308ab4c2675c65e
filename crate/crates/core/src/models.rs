//! Fixture generators: discretized linear systems, analytic two-state chains,
//! randomized families with a built-in minorization, and small families that
//! exercise the r-step machinery.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{fit_drift, Sandwich};
use crate::error::{Error, Result};
use crate::exec;
use crate::sampling;
use crate::statespace::{Kernel, Lyapunov, Observable, ParametricFamily, StateSpace, Theta};
use crate::tolerance;

/// Parameter grid as written in model and config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    /// Scalar parameter values.
    Values(Vec<f64>),
    /// Vector-valued parameters.
    Points(Vec<Vec<f64>>),
    /// `points` equally spaced scalars from `start` to `stop` inclusive.
    Linspace { start: f64, stop: f64, points: usize },
}

impl GridSpec {
    pub fn thetas(&self) -> Result<Vec<Theta>> {
        let out: Vec<Theta> = match self {
            GridSpec::Values(v) => v.iter().map(|&x| vec![x]).collect(),
            GridSpec::Points(p) => p.clone(),
            GridSpec::Linspace { start, stop, points } => match points {
                0 => Vec::new(),
                1 => vec![vec![*start]],
                &m => (0..m)
                    .map(|i| vec![start + (stop - start) * i as f64 / (m - 1) as f64])
                    .collect(),
            },
        };
        if out.is_empty() {
            return Err(Error::model("grid", "parameter grid is empty"));
        }
        Ok(out)
    }
}

/// `c0 + c1 theta_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub c0: f64,
    #[serde(default)]
    pub c1: f64,
}

impl Affine {
    pub fn at(&self, theta: &[f64]) -> f64 {
        self.c0 + self.c1 * theta.first().copied().unwrap_or(0.0)
    }
}

/// A generated family with its Lyapunov function and fixture metadata.
#[derive(Debug, Clone)]
pub struct Generated {
    pub family: ParametricFamily,
    pub v: Lyapunov,
    /// Per-parameter Lyapunov functions, when the fixture is built around them.
    pub v_family: Option<Vec<Lyapunov>>,
    pub sandwich: Option<Sandwich>,
    /// `(gamma, K)` of the per-parameter drift, when known exactly.
    pub individual_drift: Option<(f64, f64)>,
    pub linear_self_test: Option<Vec<SelfTest>>,
    pub notes: Vec<String>,
}

impl Generated {
    fn plain(family: ParametricFamily, v: Lyapunov) -> Self {
        Self {
            family,
            v,
            v_family: None,
            sandwich: None,
            individual_drift: None,
            linear_self_test: None,
            notes: Vec::new(),
        }
    }
}

/// Generators addressable by name from config and model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    TwoState {
        grid: GridSpec,
        p: Affine,
        q: Affine,
        /// Observable values on the two states.
        #[serde(default = "default_two_state_f")]
        f: [f64; 2],
        /// Lyapunov values on the two states.
        #[serde(default = "default_two_state_v")]
        v: [f64; 2],
    },
    RandomMinorized {
        states: usize,
        grid: GridSpec,
        seed: u64,
        alpha_floor: f64,
    },
    Linear(LinearSystemSpec),
    RStepExample {
        grid: GridSpec,
    },
    ShrinkingWalk {
        states: usize,
        grid: GridSpec,
        #[serde(default = "default_shrink")]
        shrink: f64,
        #[serde(default = "default_walk_gamma")]
        gamma: f64,
        #[serde(default = "default_max_scale")]
        max_scale: f64,
    },
}

fn default_two_state_f() -> [f64; 2] {
    [1.0, 2.0]
}
fn default_two_state_v() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_shrink() -> f64 {
    0.7
}
fn default_walk_gamma() -> f64 {
    0.8
}
fn default_max_scale() -> f64 {
    4.0
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Generated> {
        match self {
            GeneratorSpec::TwoState { grid, p, q, f, v } => {
                let thetas = grid.thetas()?;
                let fam = build_two_state_family(&thetas, |t| p.at(t), |t| q.at(t), |_| *f)?;
                Ok(Generated::plain(fam.family, Lyapunov::new(v.to_vec())?))
            }
            GeneratorSpec::RandomMinorized {
                states,
                grid,
                seed,
                alpha_floor,
            } => {
                let r = build_random_minorized_family(*states, &grid.thetas()?, *seed, *alpha_floor)?;
                Ok(Generated::plain(r.family, r.v))
            }
            GeneratorSpec::Linear(spec) => {
                let lin = build_linear_family(spec)?;
                let mut g = Generated::plain(lin.family, lin.v);
                if lin.max_boundary_mass > 0.0 {
                    g.notes.push(format!(
                        "boundary clamping moved up to {:.3e} of a row's mass onto edge cells",
                        lin.max_boundary_mass
                    ));
                }
                g.linear_self_test = Some(lin.self_test);
                Ok(g)
            }
            GeneratorSpec::RStepExample { grid } => build_r_step_example(&grid.thetas()?),
            GeneratorSpec::ShrinkingWalk {
                states,
                grid,
                shrink,
                gamma,
                max_scale,
            } => build_shrinking_walk(*states, &grid.thetas()?, *shrink, *gamma, *max_scale),
        }
    }
}

fn check_prob(name: &'static str, t: usize, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::model(
            format!("{name}(theta[{t}])"),
            format!("{p} is not in (0, 1)"),
        ))
    }
}

/// Two-state family with its closed-form invariant measures.
#[derive(Debug, Clone)]
pub struct TwoStateFamily {
    pub family: ParametricFamily,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl TwoStateFamily {
    /// `(q, p) / (p + q)`.
    pub fn mu_star(&self, t: usize) -> [f64; 2] {
        let (p, q) = (self.p[t], self.q[t]);
        [q / (p + q), p / (p + q)]
    }

    pub fn h(&self, t: usize) -> f64 {
        let f = self.family.observable(t).values();
        let m = self.mu_star(t);
        m[0] * f[0] + m[1] * f[1]
    }

    /// Centered Poisson solution `(p, -q) (f_0 - f_1) / (p + q)^2`.
    pub fn u(&self, t: usize) -> [f64; 2] {
        let f = self.family.observable(t).values();
        let (p, q) = (self.p[t], self.q[t]);
        let s = (f[0] - f[1]) / ((p + q) * (p + q));
        [p * s, -q * s]
    }
}

/// `P_theta = [[1 - p, p], [q, 1 - q]]`.
pub fn build_two_state_family(
    thetas: &[Theta],
    p_at: impl Fn(&[f64]) -> f64,
    q_at: impl Fn(&[f64]) -> f64,
    f_at: impl Fn(&[f64]) -> [f64; 2],
) -> Result<TwoStateFamily> {
    let mut p = Vec::with_capacity(thetas.len());
    let mut q = Vec::with_capacity(thetas.len());
    let mut kernels = Vec::with_capacity(thetas.len());
    let mut fs = Vec::with_capacity(thetas.len());
    for (t, th) in thetas.iter().enumerate() {
        let (pt, qt) = (p_at(th), q_at(th));
        check_prob("p", t, pt)?;
        check_prob("q", t, qt)?;
        kernels.push(Kernel::from_rows(vec![vec![1.0 - pt, pt], vec![qt, 1.0 - qt]])?);
        fs.push(Observable::new(f_at(th).to_vec())?);
        p.push(pt);
        q.push(qt);
    }
    let family = ParametricFamily::new(StateSpace::new(2)?, thetas.to_vec(), kernels, fs)?;
    Ok(TwoStateFamily { family, p, q })
}

#[derive(Debug, Clone)]
pub struct RandomFamily {
    pub family: ParametricFamily,
    pub nu: Vec<f64>,
    /// `V(x) = x^2`.
    pub v: Lyapunov,
}

fn decaying_probability(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let scale = (n as f64 / 4.0).max(1.0);
    let mut w: Vec<f64> = (0..n)
        .map(|j| -rng.random::<f64>().max(1e-300).ln() * (-(j as f64) / scale).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Rows `alpha_floor nu + (1 - alpha_floor) R_theta` where `R_theta` interpolates
/// linearly between two random stochastic matrices as `theta_0` runs over
/// `[0, 1]` (clamped outside). Random rows favour low states, so `V(x) = x^2`
/// satisfies a drift condition.
pub fn build_random_minorized_family(n: usize, thetas: &[Theta], seed: u64, alpha_floor: f64) -> Result<RandomFamily> {
    if n == 0 {
        return Err(Error::param("states", 0.0, "need at least one state"));
    }
    if !(alpha_floor > 0.0 && alpha_floor <= 1.0) {
        return Err(Error::param("alpha_floor", alpha_floor, "must lie in (0, 1]"));
    }
    let mut rng = sampling::rng_for(seed, 0);
    let nu = decaying_probability(&mut rng, n);
    let r0: Vec<Vec<f64>> = (0..n).map(|_| decaying_probability(&mut rng, n)).collect();
    let r1: Vec<Vec<f64>> = (0..n).map(|_| decaying_probability(&mut rng, n)).collect();
    let f0 = sampling::observable(&mut rng, n, None);
    let f1 = sampling::observable(&mut rng, n, None);
    let mut kernels = Vec::with_capacity(thetas.len());
    let mut fs = Vec::with_capacity(thetas.len());
    for th in thetas {
        let s = th.first().copied().unwrap_or(0.0).clamp(0.0, 1.0);
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| alpha_floor * nu[j] + (1.0 - alpha_floor) * ((1.0 - s) * r0[i][j] + s * r1[i][j]))
                    .collect()
            })
            .collect();
        kernels.push(Kernel::from_rows(rows)?);
        fs.push(Observable::new(
            f0.iter().zip(&f1).map(|(a, b)| (1.0 - s) * a + s * b).collect(),
        )?);
    }
    let family = ParametricFamily::new(StateSpace::new(n)?, thetas.to_vec(), kernels, fs)?;
    let v = Lyapunov::new((0..n).map(|x| (x * x) as f64).collect())?;
    Ok(RandomFamily { family, nu, v })
}

/// Three states, `V = (0, 2, 3)`. From 0 the chain moves to 1 with probability
/// `0.3 + 0.2 theta`, state 1 moves to 2, and state 2 returns to 0 with
/// probability 0.9. The jump from 1 to 2 breaks one-step drift for `V`;
/// two steps restore it.
pub fn build_r_step_example(thetas: &[Theta]) -> Result<Generated> {
    let mut kernels = Vec::with_capacity(thetas.len());
    let mut fs = Vec::with_capacity(thetas.len());
    for (t, th) in thetas.iter().enumerate() {
        let s = th.first().copied().unwrap_or(0.0);
        let p = 0.3 + 0.2 * s;
        check_prob("p", t, p)?;
        kernels.push(Kernel::from_rows(vec![
            vec![1.0 - p, p, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.9, 0.0, 0.1],
        ])?);
        fs.push(Observable::new(vec![1.0, s, -1.0 - 0.5 * s])?);
    }
    let family = ParametricFamily::new(StateSpace::new(3)?, thetas.to_vec(), kernels, fs)?;
    Ok(Generated::plain(family, Lyapunov::new(vec![0.0, 2.0, 3.0])?))
}

/// Walk on `0..states` moving from `x` to `round(shrink x)` or one above it,
/// each with probability 1/2, clamped to the last state. `V(x) = x` and the
/// per-parameter functions are `V_theta = s_theta V` with `s_theta` running from
/// 1 to `max_scale` as `theta_0` runs over `[0, 1]`. The per-parameter drift
/// rate is `gamma` and its constant is computed exactly.
pub fn build_shrinking_walk(
    states: usize,
    thetas: &[Theta],
    shrink: f64,
    gamma: f64,
    max_scale: f64,
) -> Result<Generated> {
    if states < 2 {
        return Err(Error::param("states", states as f64, "need at least two states"));
    }
    if !(shrink > 0.0 && shrink < gamma && gamma < 1.0) {
        return Err(Error::param("shrink", shrink, "need 0 < shrink < gamma < 1"));
    }
    if !(max_scale >= 1.0) {
        return Err(Error::param("max_scale", max_scale, "must be at least 1"));
    }
    let last = states - 1;
    let rows: Vec<Vec<f64>> = (0..states)
        .map(|x| {
            let mut row = vec![0.0; states];
            let lo = ((shrink * x as f64).round() as usize).min(last);
            row[lo] += 0.5;
            row[(lo + 1).min(last)] += 0.5;
            row
        })
        .collect();
    let kernel = Kernel::from_rows(rows)?;
    let v = Lyapunov::new((0..states).map(|x| x as f64).collect())?;
    let pv = kernel.apply_slice(v.values());
    let base_k = pv
        .iter()
        .zip(v.values())
        .map(|(p, x)| p - gamma * x)
        .fold(0.0, f64::max);
    let scales: Vec<f64> = thetas
        .iter()
        .map(|th| 1.0 + (max_scale - 1.0) * th.first().copied().unwrap_or(0.0).clamp(0.0, 1.0))
        .collect();
    let k = base_k * scales.iter().cloned().fold(0.0, f64::max);
    let v_family = scales
        .iter()
        .map(|s| Lyapunov::new(v.values().iter().map(|x| s * x).collect()))
        .collect::<Result<Vec<_>>>()?;
    let fs = thetas
        .iter()
        .map(|th| {
            let s = th.first().copied().unwrap_or(0.0);
            Observable::new((0..states).map(|x| (1.0 + s) * x as f64 / (1.0 + x as f64)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let family = ParametricFamily::new(
        StateSpace::new(states)?,
        thetas.to_vec(),
        vec![kernel; thetas.len()],
        fs,
    )?;
    Ok(Generated {
        family,
        v,
        v_family: Some(v_family),
        sandwich: Some(Sandwich {
            a: 1.0,
            b: 0.0,
            c: max_scale,
            d: 0.0,
        }),
        individual_drift: Some((gamma, k)),
        linear_self_test: None,
        notes: Vec::new(),
    })
}

/// Finite zero-mean noise distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteNoise {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl DiscreteNoise {
    /// `+-1` in every coordinate, all sign patterns equally likely.
    pub fn rademacher(m: usize) -> Self {
        let count = 1usize << m;
        let support = (0..count)
            .map(|mask| (0..m).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        Self {
            support,
            probs: vec![1.0 / count as f64; count],
        }
    }

    fn dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.len())
    }

    /// `E[U U^T]`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut s = DMatrix::zeros(m, m);
        for (u, p) in self.support.iter().zip(&self.probs) {
            let u = DVector::from_column_slice(u);
            s += *p * &u * u.transpose();
        }
        s
    }

    fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.support.len() != self.probs.len() {
            return Err(Error::model(
                "noise",
                "support and probs must be non-empty and of equal length",
            ));
        }
        let m = self.dim();
        if let Some(i) = self.support.iter().position(|u| u.len() != m) {
            return Err(Error::model(
                format!("noise.support[{i}]"),
                format!("expected {m} coordinates"),
            ));
        }
        if let Some(i) = self.probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::model(format!("noise.probs[{i}]"), "not a nonnegative number"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > tolerance::MASS {
            return Err(Error::model("noise.probs", format!("sum {total} != 1")));
        }
        for k in 0..m {
            let mean: f64 = self.support.iter().zip(&self.probs).map(|(u, p)| p * u[k]).sum();
            if mean.abs() > NOISE_MEAN_TOL {
                return Err(Error::model(format!("noise mean[{k}]"), format!("{mean} is not zero")));
            }
        }
        Ok(())
    }
}

/// Allowed deviation of the noise mean from zero.
pub const NOISE_MEAN_TOL: f64 = 1e-12;
/// Default relative tolerance of the discretization self-test.
pub const DEFAULT_SELF_TEST_TOL: f64 = 0.10;
/// Agreement between the eigenvalue and semidefinite-ordering drift rates.
pub const PSD_AGREEMENT_TOL: f64 = 1e-6;

/// Box `[lo, hi]` per axis with `points` equally spaced cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: Vec<usize>,
}

impl BoxGrid {
    fn validate(&self, d: usize) -> Result<()> {
        if self.lo.len() != d || self.hi.len() != d || self.points.len() != d {
            return Err(Error::model("grid", format!("lo, hi and points need {d} entries")));
        }
        for k in 0..d {
            if !(self.lo[k] < self.hi[k]) || self.points[k] < 2 {
                return Err(Error::model(
                    format!("grid axis {k}"),
                    "need lo < hi and at least 2 points",
                ));
            }
        }
        Ok(())
    }

    fn step(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / (self.points[k] - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell centers; the last axis varies fastest.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let d = self.points.len();
        (0..self.len())
            .map(|mut idx| {
                let mut x = vec![0.0; d];
                for k in (0..d).rev() {
                    x[k] = self.lo[k] + self.step(k) * (idx % self.points[k]) as f64;
                    idx /= self.points[k];
                }
                x
            })
            .collect()
    }

    /// Nearest cell of `y`, clamped into the box. The flag reports clamping.
    fn nearest(&self, y: &[f64]) -> (usize, bool) {
        let mut idx = 0;
        let mut clamped = false;
        for (k, &yk) in y.iter().enumerate() {
            let raw = ((yk - self.lo[k]) / self.step(k)).round();
            let max = (self.points[k] - 1) as f64;
            if raw < 0.0 || raw > max {
                clamped = true;
            }
            idx = idx * self.points[k] + raw.clamp(0.0, max) as usize;
        }
        (idx, clamped)
    }
}

/// Observable attached to a discretized linear system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearObservable {
    /// `x_index + shift theta_0`.
    Coordinate {
        index: usize,
        #[serde(default)]
        shift: f64,
    },
    /// `|x|^2`.
    SquaredNorm,
    /// `tanh(x_index)`.
    Tanh { index: usize },
}

impl Default for LinearObservable {
    fn default() -> Self {
        LinearObservable::Coordinate { index: 0, shift: 0.0 }
    }
}

/// `X' = A_theta X + B_theta U` with `A_theta = A_0 + sum_k theta_k A_{k+1}`
/// (likewise `B_theta`), `V(x) = x^T Q x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystemSpec {
    pub grid_theta: GridSpec,
    pub a_terms: Vec<Vec<Vec<f64>>>,
    pub b_terms: Vec<Vec<Vec<f64>>>,
    pub noise: DiscreteNoise,
    pub grid: BoxGrid,
    pub q: Vec<Vec<f64>>,
    #[serde(default)]
    pub observable: LinearObservable,
    #[serde(default = "default_self_test_tol")]
    pub self_test_tol: f64,
}

fn default_self_test_tol() -> f64 {
    DEFAULT_SELF_TEST_TOL
}

impl LinearSystemSpec {
    /// `X' = theta X + U`, `U = +-1`, `Q = 1`, on `points` cells over `[-width, width]`.
    pub fn scalar(thetas: Vec<f64>, points: usize, width: f64) -> Self {
        Self {
            grid_theta: GridSpec::Values(thetas),
            a_terms: vec![vec![vec![0.0]], vec![vec![1.0]]],
            b_terms: vec![vec![vec![1.0]]],
            noise: DiscreteNoise::rademacher(1),
            grid: BoxGrid {
                lo: vec![-width],
                hi: vec![width],
                points: vec![points],
            },
            q: vec![vec![1.0]],
            observable: LinearObservable::default(),
            self_test_tol: DEFAULT_SELF_TEST_TOL,
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 {
        return Err(Error::model(what, "empty matrix"));
    }
    if let Some(i) = rows.iter().position(|x| x.len() != c) {
        return Err(Error::model(format!("{what} row {i}"), format!("expected {c} columns")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::model(what, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn affine_matrix(terms: &[Vec<Vec<f64>>], theta: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if terms.len() > theta.len() + 1 || terms.is_empty() {
        return Err(Error::model(
            what,
            format!("{} terms for a {}-dimensional parameter", terms.len(), theta.len()),
        ));
    }
    let mut m = matrix(&terms[0], what)?;
    for (k, term) in terms[1..].iter().enumerate() {
        let t = matrix(term, what)?;
        if t.shape() != m.shape() {
            return Err(Error::model(
                format!("{what} term {}", k + 1),
                "shape differs from the constant term",
            ));
        }
        m += theta[k] * t;
    }
    Ok(m)
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `lambda_max(Q^{-1/2} A^T Q A Q^{-1/2})`.
pub fn drift_rate_eigen(a: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let eig = q.clone().symmetric_eigen();
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let m = &inv_sqrt * a.transpose() * q * a * &inv_sqrt;
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen().eigenvalues.max()
}

fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues.min()
}

/// Smallest `gamma` with `A^T Q A <= gamma Q` in the semidefinite order, by bisection.
pub fn drift_rate_psd(a: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let aqa = a.transpose() * q * a;
    let mut hi = 1.0;
    while min_eig_sym(&(hi * q - &aqa)) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if min_eig_sym(&(mid * q - &aqa)) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    hi
}

/// Discretized drift constants against the continuous prediction at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTest {
    pub theta_index: usize,
    pub gamma_continuous: f64,
    pub k_continuous: f64,
    pub gamma_psd: f64,
    pub psd_agreement: bool,
    pub gamma_discrete: f64,
    pub k_discrete: f64,
    /// Largest relative deviation (absolute when the continuous value is 0).
    pub deviation: f64,
    pub spectral_radius: f64,
}

#[derive(Debug, Clone)]
pub struct LinearFamily {
    pub family: ParametricFamily,
    pub v: Lyapunov,
    pub centers: Vec<Vec<f64>>,
    pub self_test: Vec<SelfTest>,
    /// Largest row mass moved by boundary clamping.
    pub max_boundary_mass: f64,
}

fn rel_dev(discrete: f64, continuous: f64) -> f64 {
    if continuous > 0.0 {
        (discrete - continuous).abs() / continuous
    } else {
        (discrete - continuous).abs()
    }
}

/// Pushes each cell center through `A x + B u` for every noise point and
/// assigns the mass to the nearest cell; mass leaving the box lands on the
/// edge cells.
pub fn build_linear_family(spec: &LinearSystemSpec) -> Result<LinearFamily> {
    spec.noise.validate()?;
    let q = matrix(&spec.q, "q")?;
    let d = q.nrows();
    if q.ncols() != d {
        return Err(Error::model("q", "must be square"));
    }
    if (&q - q.transpose()).amax() > 1e-12 {
        return Err(Error::model("q", "must be symmetric"));
    }
    let q_min = q.clone().symmetric_eigen().eigenvalues.min();
    if !(q_min > 0.0) {
        return Err(Error::model(
            "q",
            format!("smallest eigenvalue {q_min} is not positive"),
        ));
    }
    spec.grid.validate(d)?;
    if !(spec.self_test_tol > 0.0) {
        return Err(Error::param("self_test_tol", spec.self_test_tol, "must be positive"));
    }
    let thetas = spec.grid_theta.thetas()?;
    let s = spec.noise.covariance();
    let centers = spec.grid.centers();
    let n = centers.len();
    let v = Lyapunov::new(
        centers
            .iter()
            .map(|x| {
                let x = DVector::from_column_slice(x);
                (x.transpose() * &q * x)[(0, 0)]
            })
            .collect(),
    )?;

    let mut kernels = Vec::with_capacity(thetas.len());
    let mut fs = Vec::with_capacity(thetas.len());
    let mut continuous = Vec::with_capacity(thetas.len());
    let mut max_boundary_mass = 0.0f64;
    for (t, th) in thetas.iter().enumerate() {
        let a = affine_matrix(&spec.a_terms, th, "a_terms")?;
        let b = affine_matrix(&spec.b_terms, th, "b_terms")?;
        if a.shape() != (d, d) || b.nrows() != d || b.ncols() != spec.noise.dim() {
            return Err(Error::model(
                format!("theta[{t}]"),
                format!(
                    "A is {:?}, B is {:?}, expected {d}x{d} and {d}x{}",
                    a.shape(),
                    b.shape(),
                    spec.noise.dim()
                ),
            ));
        }
        let rho = spectral_radius(&a);
        if !(rho < 1.0) {
            return Err(Error::model(
                format!("theta[{t}]"),
                format!("A has spectral radius {rho} >= 1"),
            ));
        }
        let bu: Vec<DVector<f64>> = spec
            .noise
            .support
            .iter()
            .map(|u| &b * DVector::from_column_slice(u))
            .collect();
        let rows = exec::map_indexed(n, |i| {
            let ax = &a * DVector::from_column_slice(&centers[i]);
            let mut row = vec![0.0; n];
            let mut clamped = 0.0;
            for (bu, p) in bu.iter().zip(&spec.noise.probs) {
                let y = &ax + bu;
                let (j, c) = spec.grid.nearest(y.as_slice());
                row[j] += p;
                if c {
                    clamped += p;
                }
            }
            (row, clamped)
        });
        max_boundary_mass = rows.iter().map(|r| r.1).fold(max_boundary_mass, f64::max);
        kernels.push(Kernel::from_rows(rows.into_iter().map(|r| r.0).collect())?);
        fs.push(Observable::new(
            centers
                .iter()
                .map(|x| match spec.observable {
                    LinearObservable::Coordinate { index, shift } => {
                        x.get(index).copied().unwrap_or(0.0) + shift * th.first().copied().unwrap_or(0.0)
                    }
                    LinearObservable::SquaredNorm => x.iter().map(|c| c * c).sum(),
                    LinearObservable::Tanh { index } => x.get(index).copied().unwrap_or(0.0).tanh(),
                })
                .collect(),
        )?);
        let k_cont = (b.transpose() * &q * &b * &s).trace();
        continuous.push((drift_rate_eigen(&a, &q), k_cont, drift_rate_psd(&a, &q), rho));
    }
    let family = ParametricFamily::new(StateSpace::new(n)?, thetas, kernels, fs)?;

    let mut self_test = Vec::with_capacity(family.grid_len());
    for (t, &(g_c, k_c, g_psd, rho)) in continuous.iter().enumerate() {
        let cert = fit_drift(&family.at(t), &v)?;
        let deviation = rel_dev(cert.gamma, g_c).max(rel_dev(cert.k, k_c));
        if deviation > spec.self_test_tol {
            return Err(Error::GridTooCoarse {
                theta_index: t,
                deviation,
                tol: spec.self_test_tol,
            });
        }
        self_test.push(SelfTest {
            theta_index: t,
            gamma_continuous: g_c,
            k_continuous: k_c,
            gamma_psd: g_psd,
            psd_agreement: (g_psd - g_c).abs() <= PSD_AGREEMENT_TOL,
            gamma_discrete: cert.gamma,
            k_discrete: cert.k,
            deviation,
            spectral_radius: rho,
        });
    }
    Ok(LinearFamily {
        family,
        v,
        centers,
        self_test,
        max_boundary_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{fit_minorization, smallest_uniform_r, DEFAULT_RADIUS_MARGIN};

    #[test]
    fn two_state_closed_forms() {
        let fam = build_two_state_family(&[vec![0.0]], |_| 0.1, |_| 0.2, |_| [1.0, 2.0]).unwrap();
        let m = fam.mu_star(0);
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15 && (m[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((fam.h(0) - 4.0 / 3.0).abs() < 1e-15);
        let u = fam.u(0);
        assert!((u[0] + 10.0 / 9.0).abs() < 1e-14 && (u[1] - 20.0 / 9.0).abs() < 1e-14);
        let sym = build_two_state_family(&[vec![0.0]], |_| 0.3, |_| 0.3, |_| [0.0, 1.0]).unwrap();
        assert_eq!(sym.mu_star(0), [0.5, 0.5]);
        assert!(build_two_state_family(&[vec![0.0]], |_| 1.0, |_| 0.3, |_| [0.0, 1.0]).is_err());
    }

    #[test]
    fn random_family_minorized_by_construction() {
        let grid: Vec<Theta> = (0..5).map(|i| vec![i as f64 / 4.0]).collect();
        let r = build_random_minorized_family(8, &grid, 11, 0.3).unwrap();
        let drift = fit_drift(&r.family, &r.v).unwrap();
        let m = fit_minorization(&r.family, &r.v, &drift, drift.default_radius(DEFAULT_RADIUS_MARGIN)).unwrap();
        assert!(m.alpha_bar >= 0.3 - 1e-12);
        let again = build_random_minorized_family(8, &grid, 11, 0.3).unwrap();
        assert_eq!(r.family, again.family);
        let other = build_random_minorized_family(8, &grid, 12, 0.3).unwrap();
        assert_ne!(r.family, other.family);
        let all_nu = build_random_minorized_family(5, &grid, 3, 1.0).unwrap();
        for t in 0..grid.len() {
            for row in all_nu.family.kernel(t).rows() {
                assert_eq!(row, &all_nu.nu[..]);
            }
        }
    }

    #[test]
    fn linear_rows_stochastic_and_self_test_refines() {
        let coarse = build_linear_family(&LinearSystemSpec::scalar(vec![0.3, 0.6], 201, 6.0)).unwrap();
        let fine = build_linear_family(&LinearSystemSpec::scalar(vec![0.3, 0.6], 401, 6.0)).unwrap();
        for lf in [&coarse, &fine] {
            for k in lf.family.kernels() {
                for row in k.rows() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                }
            }
            for st in &lf.self_test {
                assert!(st.psd_agreement);
            }
        }
        let dev = |lf: &LinearFamily| lf.self_test.iter().map(|s| s.deviation).fold(0.0, f64::max);
        assert!(dev(&fine) < dev(&coarse));
        assert!(dev(&coarse) < 0.10 && dev(&fine) < 0.05);
    }

    #[test]
    fn zero_dynamics_gives_identical_rows() {
        let lf = build_linear_family(&LinearSystemSpec::scalar(vec![0.0], 61, 3.0)).unwrap();
        let k = lf.family.kernel(0);
        for row in k.rows() {
            assert_eq!(row, k.row(0));
        }
    }

    #[test]
    fn unstable_and_coarse_rejected() {
        assert!(build_linear_family(&LinearSystemSpec::scalar(vec![1.2], 41, 6.0)).is_err());
        let mut spec = LinearSystemSpec::scalar(vec![0.3], 21, 6.0);
        spec.self_test_tol = 0.01;
        assert!(matches!(build_linear_family(&spec), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn psd_rate_matches_eigen_rate_2d() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.4]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!((drift_rate_eigen(&a, &q) - drift_rate_psd(&a, &q)).abs() < 1e-9);
    }

    #[test]
    fn shrinking_walk_needs_seven_steps() {
        let g = build_shrinking_walk(40, &[vec![0.0], vec![1.0]], 0.7, 0.8, 4.0).unwrap();
        let s = g.sandwich.unwrap();
        assert_eq!(smallest_uniform_r(0.8, s.c / s.a), Some(7));
    }

    #[test]
    fn r_step_example_fails_one_step() {
        let g = build_r_step_example(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(fit_drift(&g.family, &g.v), Err(Error::InfeasibleDrift { .. })));
        assert!(fit_drift(&g.family.powered(2), &g.v).is_ok());
    }
}

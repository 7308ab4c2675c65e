//! Finite state spaces, measures, observables and transition kernels.
//!
//! Every type validates its invariants on construction and is immutable
//! afterwards. Kernels are dense row-major matrices; row `i` is the
//! distribution `P(x_i, .)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::tolerance;

/// A finite state space `{0, .., n-1}` with optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    n: usize,
    labels: Option<Vec<String>>,
}

impl StateSpace {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::model("states", "state count must be at least 1"));
        }
        Ok(Self { n, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, l) in labels.iter().enumerate() {
            if !seen.insert(l.as_str()) {
                return Err(Error::model(format!("labels[{i}]"), format!("duplicate label `{l}`")));
            }
        }
        let mut s = Self::new(labels.len())?;
        s.labels = Some(labels);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::model(format!("{what}[{i}]"), "entry is not finite")),
        None => Ok(()),
    }
}

fn check_nonneg(values: &[f64], what: &str) -> Result<()> {
    check_finite(values, what)?;
    match values.iter().position(|&v| v < 0.0) {
        Some(i) => Err(Error::model(
            format!("{what}[{i}]"),
            format!("entry {} is negative", values[i]),
        )),
        None => Ok(()),
    }
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Anything represented by a weight vector over states.
pub trait Weights: Sized {
    fn weights(&self) -> &[f64];
    #[doc(hidden)]
    fn from_pushed(weights: Vec<f64>) -> Self;

    fn len(&self) -> usize {
        self.weights().len()
    }

    fn is_empty(&self) -> bool {
        self.weights().is_empty()
    }

    fn mass(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// `integral of phi d(self)`.
    fn integrate(&self, phi: &[f64]) -> f64 {
        self.weights().iter().zip(phi).map(|(w, p)| w * p).sum()
    }
}

/// Nonnegative measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Measure(Vec<f64>);

impl Measure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_nonneg(&weights, "measure")?;
        Ok(Self(weights))
    }

    /// A measure of unit mass (within [`tolerance::MASS`]).
    pub fn probability(weights: Vec<f64>) -> Result<Self> {
        let m = Self::new(weights)?;
        let mass = m.mass();
        if (mass - 1.0).abs() > tolerance::MASS {
            return Err(Error::model("measure", format!("total mass {mass} differs from 1")));
        }
        Ok(m)
    }

    pub fn dirac(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self - other` as a signed measure.
    pub fn minus(&self, other: &Measure) -> SignedMeasure {
        SignedMeasure(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl Weights for Measure {
    fn weights(&self) -> &[f64] {
        &self.0
    }
    fn from_pushed(weights: Vec<f64>) -> Self {
        Self(weights.into_iter().map(|w| w.max(0.0)).collect())
    }
}

/// Signed measure; houses differences of probability measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignedMeasure(Vec<f64>);

impl SignedMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_finite(&weights, "signed measure")?;
        Ok(Self(weights))
    }

    pub fn zero(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Entrywise absolute values: the variation measure `|eta|`.
    pub fn total_variation(&self) -> Measure {
        Measure(self.0.iter().map(|w| w.abs()).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|w| c * w).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<&Measure> for SignedMeasure {
    fn from(m: &Measure) -> Self {
        Self(m.0.clone())
    }
}

impl Weights for SignedMeasure {
    fn weights(&self) -> &[f64] {
        &self.0
    }
    fn from_pushed(weights: Vec<f64>) -> Self {
        Self(weights)
    }
}

/// Real function on states (houses f, phi, u, v).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observable(Vec<f64>);

impl Observable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "observable")?;
        Ok(Self(values))
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self(vec![c; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v + c).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| c * v).collect())
    }

    pub fn sub(&self, other: &Observable) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

/// Nonnegative Lyapunov function V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lyapunov(Vec<f64>);

impl Lyapunov {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_nonneg(&values, "lyapunov")?;
        Ok(Self(values))
    }

    pub fn zero(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Weight function `1 + beta V(x)`.
    pub fn weight(&self, beta: f64) -> Vec<f64> {
        self.0.iter().map(|v| 1.0 + beta * v).collect()
    }

    pub fn as_observable(&self) -> Observable {
        Observable(self.0.clone())
    }
}

/// Row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Kernel {
    n: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Kernel {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Kernel::from_rows(rows)
    }
}

impl From<Kernel> for Vec<Vec<f64>> {
    fn from(k: Kernel) -> Self {
        k.rows().map(|r| r.to_vec()).collect()
    }
}

impl Kernel {
    /// Builds a kernel from dense rows, reporting the first violated entry.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::model("kernel", "kernel has no rows"));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::model(
                    format!("row {i}"),
                    format!("has {} entries, expected {n}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(n, data, tolerance::ROW_SUM)
    }

    fn from_flat(n: usize, data: Vec<f64>, row_tol: f64) -> Result<Self> {
        for i in 0..n {
            let row = &data[i * n..(i + 1) * n];
            for (j, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::model(
                        format!("row {i}, entry {j}"),
                        format!("transition probability {p} is not a nonnegative number"),
                    ));
                }
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > row_tol {
                return Err(Error::model(format!("row {i}"), format!("row sums to {s}, not 1")));
            }
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    /// Permutation kernel sending state `i` to `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, &j) in perm.iter().enumerate() {
            if j >= n {
                return Err(Error::model(format!("perm[{i}]"), "target out of range"));
            }
            rows[i][j] = 1.0;
        }
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// `(P mu)(j) = sum_i mu(i) P(i, j)`.
    pub fn push_measure<M: Weights>(&self, mu: &M) -> Result<M> {
        check_len("push_measure", self.n, mu.len())?;
        Ok(M::from_pushed(self.push_slice(mu.weights())))
    }

    pub(crate) fn push_slice(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (wi, row) in w.iter().zip(self.rows()) {
            if *wi == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(row) {
                *o += wi * p;
            }
        }
        out
    }

    /// `(P* phi)(i) = sum_j P(i, j) phi(j)`.
    pub fn apply_function(&self, phi: &Observable) -> Result<Observable> {
        check_len("apply_function", self.n, phi.len())?;
        Ok(Observable(self.apply_slice(&phi.0)))
    }

    pub(crate) fn apply_slice(&self, phi: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|row| row.iter().zip(phi).map(|(p, f)| p * f).sum())
            .collect()
    }

    /// Matrix product `self * other` (first step by `self`).
    pub fn compose(&self, other: &Kernel) -> Result<Kernel> {
        check_len("compose", self.n, other.n)?;
        let n = self.n;
        let rows = exec::map_indexed(n, |i| {
            let mut out = vec![0.0; n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
            out
        });
        Kernel::from_flat(n, rows.concat(), tolerance::POWER_ROW_SUM)
    }

    /// `P^m` by repeated squaring; `m = 0` gives the identity.
    pub fn power(&self, m: usize) -> Kernel {
        let mut result = Kernel::identity(self.n);
        let mut base = self.clone();
        let mut e = m;
        while e > 0 {
            if e & 1 == 1 {
                result = result.compose(&base).expect("stochastic product");
            }
            e >>= 1;
            if e > 0 {
                base = base.compose(&base).expect("stochastic product");
            }
        }
        result
    }
}

/// A point of the parameter set, in `R^k`.
pub type Theta = Vec<f64>;

/// Euclidean distance between parameter points.
pub fn theta_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Which pairs of grid points Lipschitz statements are checked over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Consecutive points in grid order.
    #[default]
    Adjacent,
    /// Every unordered pair.
    All,
}

/// Kernels and observables indexed by a finite parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFamily {
    space: StateSpace,
    thetas: Vec<Theta>,
    kernels: Vec<Kernel>,
    observables: Vec<Observable>,
}

impl ParametricFamily {
    pub fn new(
        space: StateSpace,
        thetas: Vec<Theta>,
        kernels: Vec<Kernel>,
        observables: Vec<Observable>,
    ) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::model("theta", "parameter grid is empty"));
        }
        let k = thetas[0].len();
        for (t, th) in thetas.iter().enumerate() {
            if th.len() != k {
                return Err(Error::model(
                    format!("theta[{t}]"),
                    format!("dimension {} != {k}", th.len()),
                ));
            }
            check_finite(th, &format!("theta[{t}]"))?;
        }
        if kernels.len() != thetas.len() {
            return Err(Error::model(
                "kernels",
                format!("{} kernels for {} grid points", kernels.len(), thetas.len()),
            ));
        }
        if observables.len() != thetas.len() {
            return Err(Error::model(
                "observables",
                format!("{} observables for {} grid points", observables.len(), thetas.len()),
            ));
        }
        let n = space.len();
        for (t, kern) in kernels.iter().enumerate() {
            if kern.len() != n {
                return Err(Error::model(
                    format!("kernels[{t}]"),
                    format!("{} states, expected {n}", kern.len()),
                ));
            }
        }
        for (t, f) in observables.iter().enumerate() {
            if f.len() != n {
                return Err(Error::model(
                    format!("observables[{t}]"),
                    format!("{} entries, expected {n}", f.len()),
                ));
            }
        }
        Ok(Self {
            space,
            thetas,
            kernels,
            observables,
        })
    }

    /// One kernel, one observable, parameter grid `{[0]}`.
    pub fn single(kernel: Kernel, f: Observable) -> Result<Self> {
        let space = StateSpace::new(kernel.len())?;
        Self::new(space, vec![vec![0.0]], vec![kernel], vec![f])
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn n_states(&self) -> usize {
        self.space.len()
    }

    pub fn grid_len(&self) -> usize {
        self.thetas.len()
    }

    pub fn thetas(&self) -> &[Theta] {
        &self.thetas
    }

    pub fn theta(&self, t: usize) -> &[f64] {
        &self.thetas[t]
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn kernel(&self, t: usize) -> &Kernel {
        &self.kernels[t]
    }

    pub fn observables(&self) -> &[Observable] {
        &self.observables
    }

    pub fn observable(&self, t: usize) -> &Observable {
        &self.observables[t]
    }

    /// The family of r-step kernels on the same grid.
    pub fn powered(&self, r: usize) -> Self {
        let kernels = exec::map_indexed(self.kernels.len(), |t| self.kernels[t].power(r));
        Self {
            space: self.space.clone(),
            thetas: self.thetas.clone(),
            kernels,
            observables: self.observables.clone(),
        }
    }

    /// Restriction to a single grid point.
    pub fn at(&self, t: usize) -> Self {
        Self {
            space: self.space.clone(),
            thetas: vec![self.thetas[t].clone()],
            kernels: vec![self.kernels[t].clone()],
            observables: vec![self.observables[t].clone()],
        }
    }

    /// Grid pairs `(t, t')`, `t < t'`, in deterministic order.
    pub fn pairs(&self, mode: PairMode) -> Vec<(usize, usize)> {
        let m = self.thetas.len();
        match mode {
            PairMode::Adjacent => (1..m).map(|t| (t - 1, t)).collect(),
            PairMode::All => (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect(),
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        theta_distance(&self.thetas[a], &self.thetas[b])
    }

    /// SHA-256 of the grid coordinates, hex encoded.
    pub fn grid_hash(&self) -> String {
        let mut h = Sha256::new();
        for th in &self.thetas {
            h.update((th.len() as u64).to_le_bytes());
            for v in th {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p2() -> Kernel {
        Kernel::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn push_fixed_point_of_two_state_chain() {
        let mu = Measure::probability(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        let out = p2().push_measure(&mu).unwrap();
        assert!((out.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.weights()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn push_dirac_extracts_row() {
        let out = p2().push_measure(&Measure::dirac(2, 0)).unwrap();
        assert_eq!(out.weights(), &[0.9, 0.1]);
    }

    #[test]
    fn identity_push_and_apply() {
        let id = Kernel::identity(3);
        let mu = Measure::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(id.push_measure(&mu).unwrap(), mu);
        let phi = Observable::new(vec![1.0, -2.0, 7.5]).unwrap();
        assert_eq!(id.apply_function(&phi).unwrap(), phi);
    }

    #[test]
    fn apply_matrix_vector() {
        let phi = Observable::new(vec![0.0, 1.0]).unwrap();
        let out = p2().apply_function(&phi).unwrap();
        assert_eq!(out.values(), &[0.1, 0.8]);
        let c = Observable::constant(2, 3.5);
        let out = p2().apply_function(&c).unwrap();
        for v in out.values() {
            assert!((v - 3.5).abs() < 1e-15);
        }
    }

    #[test]
    fn square_of_two_state_chain() {
        let sq = p2().power(2);
        let expect = [0.83, 0.17, 0.34, 0.66];
        for (a, b) in sq.as_flat().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p2().power(0), Kernel::identity(2));
    }

    #[test]
    fn permutation_order_gives_identity() {
        let p = Kernel::permutation(&[1, 2, 0]).unwrap();
        assert_eq!(p.power(3), Kernel::identity(3));
        assert_ne!(p.power(2), Kernel::identity(3));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let phi = Observable::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            p2().apply_function(&phi),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3,
                ..
            })
        ));
    }

    #[test]
    fn bad_row_names_its_index() {
        let err = Kernel::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.49]]).unwrap_err();
        match err {
            Error::InvalidModel { location, .. } => assert_eq!(location, "row 1"),
            e => panic!("unexpected {e}"),
        }
        let err = Kernel::from_rows(vec![vec![1.1, -0.1], vec![0.5, 0.5]]).unwrap_err();
        assert!(err.to_string().contains("row 0, entry 1"));
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(StateSpace::with_labels(vec!["a".into(), "a".into()]).is_err());
        assert!(StateSpace::new(0).is_err());
    }

    #[test]
    fn pair_modes() {
        let k = Kernel::identity(1);
        let f = Observable::constant(1, 0.0);
        let fam = ParametricFamily::new(
            StateSpace::new(1).unwrap(),
            vec![vec![0.0], vec![1.0], vec![3.0]],
            vec![k.clone(), k.clone(), k],
            vec![f.clone(), f.clone(), f],
        )
        .unwrap();
        assert_eq!(fam.pairs(PairMode::Adjacent), vec![(0, 1), (1, 2)]);
        assert_eq!(fam.pairs(PairMode::All), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(fam.distance(0, 2), 3.0);
    }
}

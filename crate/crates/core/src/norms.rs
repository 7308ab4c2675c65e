//! Weighted norms and metrics built on the weight `w(x) = 1 + beta V(x)`.
//!
//! * `||phi||_beta = max_x |phi(x)| / w(x)`
//! * `d_beta(x, y) = w(x) + w(y)` for `x != y`, and `0` on the diagonal
//! * `|||phi|||_beta = max_{x != y} |phi(x) - phi(y)| / d_beta(x, y)`
//! * `rho_beta(eta) = sum_x w(x) |eta(x)|`
//!
//! For zero-mass `eta`, the dual norm `sigma_beta(eta)` over the unit ball of
//! `|||.|||_beta` coincides with `rho_beta(eta)`; production code uses the
//! closed form and [`sigma_beta_dual_oracle`] exists for cross-checking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pwl::{self, Line};
use crate::simplex;
use crate::statespace::{Lyapunov, Measure, Observable, SignedMeasure, Weights};

/// Above this many states the min-shift search bisects instead of building
/// the exact envelope.
pub const EXACT_SHIFT_LIMIT: usize = 10_000;

/// The scalar beta > 0 weighting norms and metrics.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WeightParam(f64);

impl WeightParam {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::param("beta", beta, "must be a positive finite number"));
        }
        Ok(Self(beta))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for WeightParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightParam> for f64 {
    fn from(b: WeightParam) -> f64 {
        b.0
    }
}

/// Precomputed weight vector `1 + beta V`; every norm is a method on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    beta: f64,
    w: Vec<f64>,
}

/// Value of `|||phi|||_beta` together with the first maximising pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscWitness {
    pub value: f64,
    pub pair: Option<(usize, usize)>,
}

impl Weighting {
    pub fn new(v: &Lyapunov, beta: WeightParam) -> Self {
        Self {
            beta: beta.get(),
            w: v.weight(beta.get()),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn sup(&self, phi: &[f64]) -> f64 {
        phi.iter().zip(&self.w).map(|(p, w)| p.abs() / w).fold(0.0, f64::max)
    }

    pub fn d(&self, x: usize, y: usize) -> f64 {
        if x == y {
            0.0
        } else {
            self.w[x] + self.w[y]
        }
    }

    pub fn osc(&self, phi: &[f64]) -> f64 {
        self.osc_witness(phi).value
    }

    /// Pairwise maximum; ties keep the first pair in lexicographic order.
    pub fn osc_witness(&self, phi: &[f64]) -> OscWitness {
        let mut best = OscWitness { value: 0.0, pair: None };
        let n = phi.len();
        for i in 0..n {
            let (pi, wi) = (phi[i], self.w[i]);
            for j in i + 1..n {
                let r = (pi - phi[j]).abs() / (wi + self.w[j]);
                if r > best.value {
                    best.value = r;
                    best.pair = Some((i, j));
                }
            }
        }
        best
    }

    pub fn rho(&self, eta: &[f64]) -> f64 {
        eta.iter().zip(&self.w).map(|(e, w)| e.abs() * w).sum()
    }

    /// `sum_x w(x) mu(x)`, i.e. `mu(1 + beta V)` for a nonnegative measure.
    pub fn mass_weighted(&self, mu: &[f64]) -> f64 {
        self.rho(mu)
    }
}

fn check_dims(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: a,
            found: b,
        });
    }
    Ok(())
}

pub fn sup_norm_beta(phi: &Observable, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    check_dims("sup_norm_beta", v.len(), phi.len())?;
    Ok(Weighting::new(v, beta).sup(phi.values()))
}

pub fn d_beta(x: usize, y: usize, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    if x >= v.len() || y >= v.len() {
        return Err(Error::DimensionMismatch {
            context: "d_beta",
            expected: v.len(),
            found: x.max(y) + 1,
        });
    }
    Ok(if x == y {
        0.0
    } else {
        2.0 + beta.get() * (v.values()[x] + v.values()[y])
    })
}

pub fn osc_seminorm(phi: &Observable, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    Ok(osc_seminorm_witness(phi, v, beta)?.value)
}

pub fn osc_seminorm_witness(phi: &Observable, v: &Lyapunov, beta: WeightParam) -> Result<OscWitness> {
    check_dims("osc_seminorm", v.len(), phi.len())?;
    Ok(Weighting::new(v, beta).osc_witness(phi.values()))
}

/// `min_c ||phi + c||_beta` and the minimising shift.
///
/// Returns `(value, c_star)`.
pub fn osc_via_min_shift(phi: &Observable, v: &Lyapunov, beta: WeightParam) -> Result<(f64, f64)> {
    check_dims("osc_via_min_shift", v.len(), phi.len())?;
    let wt = Weighting::new(v, beta);
    Ok(min_shift(phi.values(), wt.weights()))
}

pub(crate) fn min_shift(phi: &[f64], w: &[f64]) -> (f64, f64) {
    let lo = -phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = -phi.iter().copied().fold(f64::INFINITY, f64::min);
    let c = if lo == hi {
        lo
    } else if phi.len() <= EXACT_SHIFT_LIMIT {
        let lines: Vec<Line> = phi
            .iter()
            .zip(w)
            .flat_map(|(&p, &wi)| [Line::new(1.0 / wi, p / wi), Line::new(-1.0 / wi, -p / wi)])
            .collect();
        pwl::minimize_max(&lines, lo, hi).0
    } else {
        bisect_shift(phi, w, lo, hi)
    };
    let value = phi.iter().zip(w).map(|(p, wi)| (p + c).abs() / wi).fold(0.0, f64::max);
    (value, c)
}

/// Root of `max_i (phi_i + c)/w_i - max_i -(phi_i + c)/w_i`, increasing in `c`.
fn bisect_shift(phi: &[f64], w: &[f64], mut lo: f64, mut hi: f64) -> f64 {
    let g = |c: f64| {
        let mut up = f64::NEG_INFINITY;
        let mut down = f64::NEG_INFINITY;
        for (p, wi) in phi.iter().zip(w) {
            up = up.max((p + c) / wi);
            down = down.max(-(p + c) / wi);
        }
        up - down
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn rho_beta(eta: &SignedMeasure, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    check_dims("rho_beta", v.len(), eta.len())?;
    Ok(Weighting::new(v, beta).rho(eta.weights()))
}

/// `sigma_beta(mu1, mu2)` through its closed form `rho_beta(mu1 - mu2)`.
pub fn sigma_beta(mu1: &Measure, mu2: &Measure, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    check_dims("sigma_beta", mu1.len(), mu2.len())?;
    rho_beta(&mu1.minus(mu2), v, beta)
}

/// `sup { eta(phi) : |||phi|||_beta <= 1 }` solved as a linear program.
///
/// Variables are `phi(1..n)` with `phi(0) = 0` (the objective ignores shifts
/// when `eta` has zero mass), split into positive and negative parts.
pub fn sigma_beta_dual_oracle(eta: &SignedMeasure, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    check_dims("sigma_beta_dual_oracle", v.len(), eta.len())?;
    let mass = eta.mass();
    if mass.abs() > 1e-10 {
        return Err(Error::param(
            "eta mass",
            mass,
            "dual problem is unbounded unless the signed measure has zero mass",
        ));
    }
    let n = eta.len();
    if n == 1 {
        return Ok(0.0);
    }
    let wt = Weighting::new(v, beta);
    let m = n - 1;
    let var = |state: usize| state - 1;
    let mut c = vec![0.0; 2 * m];
    for s in 1..n {
        c[var(s)] = eta.weights()[s];
        c[m + var(s)] = -eta.weights()[s];
    }
    let mut a = Vec::with_capacity(n * (n - 1));
    let mut b = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // phi_i - phi_j <= d(i, j)
            let mut row = vec![0.0; 2 * m];
            if i > 0 {
                row[var(i)] += 1.0;
                row[m + var(i)] -= 1.0;
            }
            if j > 0 {
                row[var(j)] -= 1.0;
                row[m + var(j)] += 1.0;
            }
            a.push(row);
            b.push(wt.d(i, j));
        }
    }
    let sol = simplex::maximize(&c, &a, &b)?;
    let mut phi = vec![0.0; n];
    for s in 1..n {
        phi[s] = sol.x[var(s)] - sol.x[m + var(s)];
    }
    let osc = wt.osc(&phi);
    if osc > 1.0 + 1e-9 {
        return Err(Error::LinearProgram(format!("maximizer has |||phi||| = {osc} > 1")));
    }
    Ok(sol.value)
}

/// Pairing bound `|eta(phi)| <= |||phi||| * rho(eta)` for zero-mass `eta`.
pub fn duality_gap(phi: &Observable, eta: &SignedMeasure, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    let lhs = eta.integrate(phi.values()).abs();
    Ok(osc_seminorm(phi, v, beta)? * rho_beta(eta, v, beta)? - lhs)
}

/// Shift making `||phi + c||_beta` minimal, using the closed form from the
/// maximising pair `(i, j)`: `c = -(phi_i w_j + phi_j w_i) / (w_i + w_j)`.
pub fn pair_shift(phi: &Observable, v: &Lyapunov, beta: WeightParam) -> Result<f64> {
    let wt = Weighting::new(v, beta);
    let p = phi.values();
    match osc_seminorm_witness(phi, v, beta)?.pair {
        None => Ok(-p[0]),
        Some((i, j)) => {
            let (wi, wj) = (wt.w[i], wt.w[j]);
            Ok(-(p[i] * wj + p[j] * wi) / (wi + wj))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> WeightParam {
        WeightParam::new(x).unwrap()
    }

    fn obs(v: &[f64]) -> Observable {
        Observable::new(v.to_vec()).unwrap()
    }

    fn lyap(v: &[f64]) -> Lyapunov {
        Lyapunov::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sup_norm_examples() {
        let v = lyap(&[0.0, 1.0]);
        assert_eq!(sup_norm_beta(&obs(&[0.0, 0.0]), &v, b(1.0)).unwrap(), 0.0);
        assert_eq!(sup_norm_beta(&obs(&[1.0, 3.0]), &v, b(1.0)).unwrap(), 1.5);
        assert_eq!(sup_norm_beta(&obs(&[-2.0, -6.0]), &v, b(1.0)).unwrap(), 3.0);
    }

    #[test]
    fn d_beta_examples() {
        let v = lyap(&[0.0, 1.0]);
        assert_eq!(d_beta(1, 1, &v, b(1.0)).unwrap(), 0.0);
        assert_eq!(d_beta(0, 1, &v, b(1.0)).unwrap(), 3.0);
        assert_eq!(d_beta(0, 2, &lyap(&[0.0; 3]), b(5.0)).unwrap(), 2.0);
    }

    #[test]
    fn osc_examples() {
        let v = lyap(&[0.0, 1.0]);
        assert_eq!(osc_seminorm(&obs(&[4.0, 4.0]), &v, b(1.0)).unwrap(), 0.0);
        assert!((osc_seminorm(&obs(&[1.0, 3.0]), &v, b(1.0)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let w = osc_seminorm_witness(&obs(&[0.0, 1.0, 2.0]), &lyap(&[0.0; 3]), b(1.0)).unwrap();
        assert_eq!(w.value, 1.0);
        assert_eq!(w.pair, Some((0, 2)));
    }

    #[test]
    fn min_shift_examples() {
        let v = lyap(&[0.0, 1.0]);
        let (val, c) = osc_via_min_shift(&obs(&[1.0, 3.0]), &v, b(1.0)).unwrap();
        assert!((val - 2.0 / 3.0).abs() < 1e-12);
        assert!((c + 5.0 / 3.0).abs() < 1e-12);
        assert!((pair_shift(&obs(&[1.0, 3.0]), &v, b(1.0)).unwrap() + 5.0 / 3.0).abs() < 1e-12);
        let (val, c) = osc_via_min_shift(&obs(&[2.5, 2.5]), &v, b(1.0)).unwrap();
        assert_eq!((val, c), (0.0, -2.5));
    }

    #[test]
    fn bisection_matches_envelope() {
        let phi: Vec<f64> = (0..50)
            .map(|i| ((i * 37) % 11) as f64 - 3.0 * (i as f64).sin())
            .collect();
        let w: Vec<f64> = (0..50).map(|i| 1.0 + 0.1 * ((i * 7) % 13) as f64).collect();
        let exact = min_shift(&phi, &w).0;
        let lo = -phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = -phi.iter().copied().fold(f64::INFINITY, f64::min);
        let c = bisect_shift(&phi, &w, lo, hi);
        let val = phi.iter().zip(&w).map(|(p, wi)| (p + c).abs() / wi).fold(0.0, f64::max);
        assert!((exact - val).abs() < 1e-12);
    }

    #[test]
    fn rho_examples() {
        let v = lyap(&[0.0, 1.0]);
        let eta = SignedMeasure::new(vec![1.0, -1.0]).unwrap();
        assert_eq!(rho_beta(&eta, &v, b(1.0)).unwrap(), 3.0);
        assert_eq!(rho_beta(&SignedMeasure::zero(2), &v, b(1.0)).unwrap(), 0.0);
        assert_eq!(rho_beta(&eta.scaled(-2.0), &v, b(1.0)).unwrap(), 6.0);
    }

    #[test]
    fn dual_oracle_examples() {
        let v = lyap(&[0.0, 1.0]);
        let eta = SignedMeasure::new(vec![1.0, -1.0]).unwrap();
        assert!((sigma_beta_dual_oracle(&eta, &v, b(1.0)).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(
            sigma_beta_dual_oracle(&SignedMeasure::zero(2), &v, b(1.0)).unwrap(),
            0.0
        );
        let bad = SignedMeasure::new(vec![1.0, 0.0]).unwrap();
        assert!(sigma_beta_dual_oracle(&bad, &v, b(1.0)).is_err());
    }

    #[test]
    fn weight_param_rejects_nonpositive() {
        assert!(WeightParam::new(0.0).is_err());
        assert!(WeightParam::new(f64::NAN).is_err());
    }
}

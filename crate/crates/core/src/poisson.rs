//! Invariant measures and solutions of the Poisson equation
//! `(I - P*) u = f - h`, `h = mu*(f)`, normalised by `mu*(u) = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certify::{ContractionConstants, DriftCertificate, RStepCertificate};
use crate::error::{Error, Result};
use crate::norms::{WeightParam, Weighting};
use crate::statespace::{Kernel, Lyapunov, Measure, Observable, Weights};
use crate::tolerance;

pub const DEFAULT_INVARIANT_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITERATIONS: usize = 200_000;
pub const DEFAULT_SERIES_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_TERMS: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantMeasure {
    pub mu_star: Measure,
    pub iterations: usize,
    /// `sigma_beta(mu, P mu)` at exit.
    pub final_sigma_gap: f64,
    /// `rho_beta` distance to the linear-solve solution; `None` if that
    /// system was singular.
    pub oracle_gap: Option<f64>,
}

impl InvariantMeasure {
    /// `mu*(V)`.
    pub fn mean(&self, phi: &[f64]) -> f64 {
        self.mu_star.integrate(phi)
    }
}

/// Power iteration `mu <- P mu` from the uniform measure.
pub fn invariant_measure(kernel: &Kernel, v: &Lyapunov, beta: WeightParam, tol: f64) -> Result<InvariantMeasure> {
    invariant_measure_with(kernel, v, beta, tol, DEFAULT_MAX_ITERATIONS)
}

pub fn invariant_measure_with(
    kernel: &Kernel,
    v: &Lyapunov,
    beta: WeightParam,
    tol: f64,
    max_iterations: usize,
) -> Result<InvariantMeasure> {
    let n = kernel.len();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            context: "invariant_measure",
            expected: n,
            found: v.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol", tol, "must be positive"));
    }
    let wt = Weighting::new(v, beta);
    let mut mu = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let gap = loop {
        let next = kernel.push_slice(&mu);
        let diff: Vec<f64> = next.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let gap = wt.rho(&diff);
        let s: f64 = next.iter().sum();
        mu = next.into_iter().map(|x| x.max(0.0) / s).collect();
        if gap <= tol {
            break gap;
        }
        iterations += 1;
        if iterations >= max_iterations {
            return Err(Error::NonConvergence {
                what: "invariant measure power iteration",
                iterations,
            });
        }
    };
    let oracle_gap = stationary_oracle(kernel).map(|exact| {
        let d: Vec<f64> = exact.iter().zip(&mu).map(|(a, b)| a - b).collect();
        wt.rho(&d)
    });
    if let Some(g) = oracle_gap {
        if g > tolerance::INVARIANT_ORACLE {
            return Err(Error::OracleMismatch {
                what: "invariant measure",
                gap: g,
                tol: tolerance::INVARIANT_ORACLE,
            });
        }
    }
    Ok(InvariantMeasure {
        mu_star: Measure::probability(mu).map_err(|_| Error::Postcondition {
            what: "invariant_measure",
            detail: "iterate lost unit mass".into(),
        })?,
        iterations,
        final_sigma_gap: gap,
        oracle_gap,
    })
}

/// Solves `mu (P - I) = 0`, `sum mu = 1` by replacing one balance equation
/// with the normalisation. `None` when the system is singular.
pub fn stationary_oracle(kernel: &Kernel) -> Option<Vec<f64>> {
    let n = kernel.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // Row j of (P - I)^T.
            a[(j, i)] = kernel.get(i, j) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.lu();
    if !lu.is_invertible() {
        return None;
    }
    let x = lu.solve(&b)?;
    let scale = n as f64;
    let resid: f64 = {
        let mut r = 0.0f64;
        for j in 0..n {
            let s: f64 = (0..n).map(|i| x[i] * kernel.get(i, j)).sum::<f64>() - x[j];
            r = r.max(s.abs());
        }
        r
    };
    if !x.iter().all(|v| v.is_finite()) || resid > 1e-8 * scale {
        return None;
    }
    Some(x.iter().copied().collect())
}

/// Pointwise bound `|u(x)| <= bound(x)` and its slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub formula: String,
    pub bound: Vec<f64>,
    pub slack: Vec<f64>,
    pub worst_state: usize,
    pub worst_slack: f64,
}

impl BoundCheck {
    fn new(formula: &str, u: &[f64], bound: Vec<f64>) -> Result<Self> {
        let slack: Vec<f64> = bound.iter().zip(u).map(|(b, x)| b - x.abs()).collect();
        let (worst_state, worst_slack) =
            slack
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        if worst_slack < -tolerance::POISSON_RESIDUAL {
            return Err(Error::ViolatedBound {
                check: formula.to_string(),
                lhs: u[worst_state].abs(),
                rhs: bound[worst_state],
                witness: format!("state {worst_state}"),
            });
        }
        Ok(Self {
            formula: formula.to_string(),
            bound,
            slack,
            worst_state,
            worst_slack,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Series,
    Direct,
    RStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSolution {
    pub method: Method,
    pub u: Observable,
    pub h: f64,
    /// Number of series terms summed, fixed in advance by the tail bound.
    pub truncation_n: Option<usize>,
    /// `||(I - P*) u - (f - h)||_beta`.
    pub residual_norm: f64,
    /// `mu*(u)`.
    pub centering: f64,
    pub f_osc: f64,
    pub bound: Option<BoundCheck>,
}

fn postconditions(
    kernel: &Kernel,
    f: &[f64],
    u: &[f64],
    h: f64,
    mu: &[f64],
    wt: &Weighting,
    what: &'static str,
) -> Result<(f64, f64)> {
    let pu = kernel.apply_slice(u);
    let r: Vec<f64> = (0..u.len()).map(|i| u[i] - pu[i] - (f[i] - h)).collect();
    let residual = wt.sup(&r);
    let centering: f64 = mu.iter().zip(u).map(|(m, x)| m * x).sum();
    if residual > tolerance::POISSON_RESIDUAL {
        return Err(Error::Postcondition {
            what,
            detail: format!("residual {residual} exceeds {}", tolerance::POISSON_RESIDUAL),
        });
    }
    if centering.abs() > tolerance::POISSON_RESIDUAL {
        return Err(Error::Postcondition {
            what,
            detail: format!("mu*(u) = {centering} is not zero"),
        });
    }
    Ok((residual, centering))
}

fn check_lens(kernel: &Kernel, f: &Observable, v: &Lyapunov, mu: &Measure) -> Result<()> {
    for (found, ctx) in [
        (f.len(), "observable"),
        (v.len(), "lyapunov"),
        (mu.len(), "invariant measure"),
    ] {
        if found != kernel.len() {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: kernel.len(),
                found,
            });
        }
    }
    Ok(())
}

/// Number of terms after which the tail
/// `|||f||| alpha^N (2 + beta max V + beta mu*(V)) / (1 - alpha)` drops below `tol`.
pub fn series_terms(f_osc: f64, alpha: f64, beta: f64, v_max: f64, mu_v: f64, tol: f64) -> Option<usize> {
    let scale = f_osc * (2.0 + beta * v_max + beta * mu_v) / (1.0 - alpha);
    if scale < tol {
        return Some(0);
    }
    let n = ((tol / scale).ln() / alpha.ln()).floor() + 1.0;
    if n.is_finite() && n < usize::MAX as f64 {
        Some(n.max(0.0) as usize)
    } else {
        None
    }
}

/// `u = sum_{n < N} (P^{*n} f - h)` with `N` from [`series_terms`].
pub fn poisson_series(
    kernel: &Kernel,
    f: &Observable,
    v: &Lyapunov,
    mu_star: &Measure,
    cc: &ContractionConstants,
    tol: f64,
) -> Result<PoissonSolution> {
    let mut sol = series_raw(kernel, f, v, mu_star, cc.alpha, cc.weight(), tol, DEFAULT_MAX_TERMS)?;
    let beta = cc.beta;
    let kb = cc.k_drift / (1.0 - cc.gamma);
    let bound: Vec<f64> = v
        .values()
        .iter()
        .map(|vx| sol.f_osc * (2.0 + beta * vx + beta * kb) / (1.0 - cc.alpha))
        .collect();
    sol.bound = Some(BoundCheck::new(
        "|u(x)| <= |||f||| (2 + beta V(x) + beta K/(1-gamma)) / (1-alpha)",
        sol.u.values(),
        bound,
    )?);
    let ku = k_u_from(cc);
    let wt = Weighting::new(v, cc.weight());
    let lhs = wt.sup(sol.u.values());
    if lhs > ku * sol.f_osc + tolerance::POISSON_RESIDUAL {
        return Err(Error::ViolatedBound {
            check: "||u||_beta <= K_u |||f|||_beta".into(),
            lhs,
            rhs: ku * sol.f_osc,
            witness: "series solution".into(),
        });
    }
    Ok(sol)
}

#[allow(clippy::too_many_arguments)]
fn series_raw(
    kernel: &Kernel,
    f: &Observable,
    v: &Lyapunov,
    mu_star: &Measure,
    alpha: f64,
    beta: WeightParam,
    tol: f64,
    max_terms: usize,
) -> Result<PoissonSolution> {
    check_lens(kernel, f, v, mu_star)?;
    if !(tol > 0.0) {
        return Err(Error::param("tol", tol, "must be positive"));
    }
    let wt = Weighting::new(v, beta);
    let fv = f.values();
    let mu = mu_star.weights();
    let h = mu_star.integrate(fv);
    let f_osc = wt.osc(fv);
    let mu_v = mu_star.integrate(v.values());
    let n_terms = series_terms(f_osc, alpha, beta.get(), v.max(), mu_v, tol).ok_or(Error::NonConvergence {
        what: "Poisson series",
        iterations: max_terms,
    })?;
    if n_terms > max_terms {
        return Err(Error::NonConvergence {
            what: "Poisson series",
            iterations: max_terms,
        });
    }
    let n = fv.len();
    let mut u = vec![0.0; n];
    let mut term: Vec<f64> = fv.to_vec();
    for k in 0..n_terms {
        for (ui, ti) in u.iter_mut().zip(&term) {
            *ui += ti - h;
        }
        if k + 1 < n_terms {
            term = kernel.apply_slice(&term);
        }
    }
    let (residual_norm, centering) = postconditions(kernel, fv, &u, h, mu, &wt, "poisson_series")?;
    Ok(PoissonSolution {
        method: Method::Series,
        u: Observable::new(u)?,
        h,
        truncation_n: Some(n_terms),
        residual_norm,
        centering,
        f_osc,
        bound: None,
    })
}

/// Least-squares solve of the stacked system `[(I - P*); mu*^T] u = [f - h; 0]`.
pub fn poisson_direct(
    kernel: &Kernel,
    f: &Observable,
    v: &Lyapunov,
    beta: WeightParam,
    mu_star: &Measure,
) -> Result<PoissonSolution> {
    check_lens(kernel, f, v, mu_star)?;
    let n = kernel.len();
    let fv = f.values();
    let mu = mu_star.weights();
    let h = mu_star.integrate(fv);
    let mut a = DMatrix::<f64>::zeros(n + 1, n);
    let mut b = DVector::<f64>::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = if i == j { 1.0 } else { 0.0 } - kernel.get(i, j);
        }
        b[i] = fv[i] - h;
    }
    for j in 0..n {
        a[(n, j)] = mu[j];
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax.max(1.0)) {
        return Err(Error::SingularSystem {
            what: "Poisson direct solve",
        });
    }
    let x = svd.solve(&b, 0.0).map_err(|_| Error::SingularSystem {
        what: "Poisson direct solve",
    })?;
    let u: Vec<f64> = x.iter().copied().collect();
    let wt = Weighting::new(v, beta);
    let (residual_norm, centering) = postconditions(kernel, fv, &u, h, mu, &wt, "poisson_direct")?;
    Ok(PoissonSolution {
        method: Method::Direct,
        u: Observable::new(u)?,
        h,
        truncation_n: None,
        residual_norm,
        centering,
        f_osc: wt.osc(fv),
        bound: None,
    })
}

/// `K_u = (2 + beta K/(1 - gamma)) / (1 - alpha)`.
pub fn k_u_constant(cc: &ContractionConstants, drift: &DriftCertificate) -> f64 {
    k_u(cc.alpha, cc.beta, drift.k, drift.gamma)
}

fn k_u_from(cc: &ContractionConstants) -> f64 {
    k_u(cc.alpha, cc.beta, cc.k_drift, cc.gamma)
}

pub fn k_u(alpha: f64, beta: f64, k: f64, gamma: f64) -> f64 {
    (2.0 + beta * k / (1.0 - gamma)) / (1.0 - alpha)
}

/// Coefficients `(a, b)` with `|u(x)| <= |||f||| (a + b V(x))` for the r-step
/// construction `u = sum_{k<r} P^{*k} v`.
pub fn r_step_bound_coefficients(cert: &RStepCertificate) -> (f64, f64) {
    let r = cert.r as f64;
    let g1 = cert.gamma_1;
    let gr = g1.powi(cert.r as i32);
    let beta = cert.beta;
    let scale = 1.0 / (1.0 - cert.alpha_r);
    let a = scale * (2.0 * r + beta * gr * cert.k_1 / (g1 - 1.0).powi(2) + beta * cert.k_r * r / (1.0 - cert.gamma_r));
    let b = scale * beta * gr / (g1 - 1.0);
    (a, b)
}

/// Single constant `K` with `|u(x)| <= K |||f||| (1 + beta V(x))`.
pub fn r_step_k(cert: &RStepCertificate) -> f64 {
    let (a, b) = r_step_bound_coefficients(cert);
    a.max(b / cert.beta)
}

/// Solves the r-step equation `(I - P^{*r}) v = f - h` by the series on `P^r`
/// and returns `u = (I + P* + ... + P^{*(r-1)}) v`.
pub fn poisson_r_step(
    kernel: &Kernel,
    f: &Observable,
    v: &Lyapunov,
    cert: &RStepCertificate,
    mu_star: &Measure,
    tol: f64,
) -> Result<PoissonSolution> {
    check_lens(kernel, f, v, mu_star)?;
    if cert.r == 1 {
        let mut sol = poisson_series(kernel, f, v, mu_star, &cert.cc_r, tol)?;
        sol.method = Method::RStep;
        return Ok(sol);
    }
    let pr = kernel.power(cert.r);
    let vsol = series_raw(&pr, f, v, mu_star, cert.alpha_r, cert.weight(), tol, DEFAULT_MAX_TERMS)?;
    let mut acc = vsol.u.values().to_vec();
    let mut u = acc.clone();
    for _ in 1..cert.r {
        acc = kernel.apply_slice(&acc);
        for (ui, a) in u.iter_mut().zip(&acc) {
            *ui += a;
        }
    }
    let wt = Weighting::new(v, cert.weight());
    let fv = f.values();
    let (residual_norm, centering) = postconditions(kernel, fv, &u, vsol.h, mu_star.weights(), &wt, "poisson_r_step")?;
    let (a, b) = r_step_bound_coefficients(cert);
    let bound: Vec<f64> = v.values().iter().map(|vx| vsol.f_osc * (a + b * vx)).collect();
    let check = BoundCheck::new(
        "|u(x)| <= |||f||| (2r + beta(g1^r V(x)/(g1-1) + g1^r K1/(g1-1)^2) + beta K_r r/(1-gamma_r)) / (1-alpha_r)",
        &u,
        bound,
    )?;
    Ok(PoissonSolution {
        method: Method::RStep,
        u: Observable::new(u)?,
        h: vsol.h,
        truncation_n: vsol.truncation_n,
        residual_norm,
        centering,
        f_osc: vsol.f_osc,
        bound: Some(check),
    })
}

/// `||a - b||_beta`, the agreement measure between two solutions.
pub fn solution_gap(a: &PoissonSolution, b: &PoissonSolution, v: &Lyapunov, beta: WeightParam) -> f64 {
    let d = a.u.sub(&b.u);
    Weighting::new(v, beta).sup(d.values())
}

/// Series solution cross-checked against the direct solve.
pub fn poisson_checked(
    kernel: &Kernel,
    f: &Observable,
    v: &Lyapunov,
    mu_star: &Measure,
    cc: &ContractionConstants,
    tol: f64,
) -> Result<(PoissonSolution, PoissonSolution, f64)> {
    let series = poisson_series(kernel, f, v, mu_star, cc, tol)?;
    let direct = poisson_direct(kernel, f, v, cc.weight(), mu_star)?;
    let gap = solution_gap(&series, &direct, v, cc.weight());
    if gap > tolerance::POISSON_ORACLE {
        return Err(Error::OracleMismatch {
            what: "Poisson series vs direct",
            gap,
            tol: tolerance::POISSON_ORACLE,
        });
    }
    Ok((series, direct, gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{fit_drift, fit_minorization, hm_constants_default};
    use crate::statespace::ParametricFamily;

    fn p2() -> Kernel {
        Kernel::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    fn v01() -> Lyapunov {
        Lyapunov::new(vec![0.0, 1.0]).unwrap()
    }

    fn b1() -> WeightParam {
        WeightParam::new(1.0).unwrap()
    }

    fn certified() -> ContractionConstants {
        let fam = ParametricFamily::single(p2(), Observable::new(vec![1.0, 2.0]).unwrap()).unwrap();
        let d = fit_drift(&fam, &v01()).unwrap();
        let m = fit_minorization(&fam, &v01(), &d, d.default_radius(0.25)).unwrap();
        hm_constants_default(&d, &m).unwrap()
    }

    #[test]
    fn two_state_invariant() {
        let im = invariant_measure(&p2(), &v01(), b1(), 1e-13).unwrap();
        assert!((im.mu_star.weights()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(im.oracle_gap.unwrap() < 1e-12);
    }

    #[test]
    fn equal_rows_converge_in_one_step() {
        let k = Kernel::from_rows(vec![vec![0.3, 0.7]; 2]).unwrap();
        let im = invariant_measure(&k, &v01(), b1(), 1e-13).unwrap();
        assert_eq!(im.iterations, 1);
        assert!((im.mu_star.weights()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn doubly_stochastic_gives_uniform() {
        let k = Kernel::from_rows(vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3], vec![0.3, 0.2, 0.5]]).unwrap();
        let v = Lyapunov::new(vec![0.0, 1.0, 2.0]).unwrap();
        let im = invariant_measure(&k, &v, b1(), 1e-13).unwrap();
        for w in im.mu_star.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_state_series_and_direct() {
        let cc = certified();
        let f = Observable::new(vec![1.0, 2.0]).unwrap();
        let im = invariant_measure(&p2(), &v01(), cc.weight(), 1e-13).unwrap();
        let (s, d, gap) = poisson_checked(&p2(), &f, &v01(), &im.mu_star, &cc, 1e-12).unwrap();
        assert!((s.h - 4.0 / 3.0).abs() < 1e-10);
        assert!((s.u.values()[0] + 10.0 / 9.0).abs() < 1e-10);
        assert!((s.u.values()[1] - 20.0 / 9.0).abs() < 1e-10);
        assert!((d.u.values()[0] + 10.0 / 9.0).abs() < 1e-10);
        assert!(gap < 1e-10);
    }

    #[test]
    fn constant_f_gives_zero() {
        let cc = certified();
        let f = Observable::constant(2, 3.0);
        let im = invariant_measure(&p2(), &v01(), cc.weight(), 1e-13).unwrap();
        let s = poisson_series(&p2(), &f, &v01(), &im.mu_star, &cc, 1e-10).unwrap();
        assert_eq!(s.truncation_n, Some(0));
        assert_eq!(s.u.values(), &[0.0, 0.0]);
        assert!((s.h - 3.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_and_identity_direct() {
        let perm = Kernel::permutation(&[1, 0]).unwrap();
        let mu = Measure::uniform(2);
        let f = Observable::new(vec![1.0, 2.0]).unwrap();
        let s = poisson_direct(&perm, &f, &v01(), b1(), &mu).unwrap();
        assert!((s.u.values()[0] + 0.25).abs() < 1e-12);
        assert!((s.u.values()[1] - 0.25).abs() < 1e-12);
        let id = Kernel::identity(2);
        assert!(matches!(
            poisson_direct(&id, &f, &v01(), b1(), &mu),
            Err(Error::SingularSystem { .. })
        ));
        assert!(stationary_oracle(&id).is_none());
    }

    #[test]
    fn k_u_arithmetic() {
        assert!((k_u(59.0 / 60.0, 0.2, 1.0, 0.5) - 144.0).abs() < 1e-9);
        assert!((k_u(0.0, 1e-12, 1.0, 0.5) - 2.0).abs() < 1e-9);
        assert!(k_u(0.5, 0.2, 1.0, 0.5) < k_u(0.6, 0.2, 1.0, 0.5));
        assert!(k_u(0.5, 0.2, 1.0, 0.5) < k_u(0.5, 0.3, 1.0, 0.5));
        assert!(k_u(0.5, 0.2, 1.0, 0.5) < k_u(0.5, 0.2, 2.0, 0.5));
    }

    #[test]
    fn series_terms_formula() {
        assert_eq!(series_terms(0.0, 0.5, 1.0, 1.0, 0.0, 1e-10), Some(0));
        // 1 * 0.5^N * 3 / 0.5 < 1e-3  <=>  N > log2(6000) = 12.55
        assert_eq!(series_terms(1.0, 0.5, 1.0, 1.0, 0.0, 1e-3), Some(13));
    }
}

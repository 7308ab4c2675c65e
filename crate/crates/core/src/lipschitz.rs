//! Parameter-Lipschitz hypotheses, the closed-form constants they imply, and
//! empirical verification of every bound over the parameter grid.

use serde::{Deserialize, Serialize};

use crate::certify::{ContractionConstants, DriftCertificate, RStepCertificate};
use crate::error::{Error, Result};
use crate::exec;
use crate::norms::{WeightParam, Weighting};
use crate::poisson::{k_u, PoissonSolution};
use crate::sampling;
use crate::statespace::{Lyapunov, Measure, PairMode, ParametricFamily, Weights};
use crate::tolerance;

/// Worst pair and state attaining an estimated constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairWitness {
    pub theta_a: usize,
    pub theta_b: usize,
    pub state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzHypotheses {
    pub l_p: f64,
    pub l_f: f64,
    /// `sup_theta |||f_theta|||_beta`.
    pub k_f: f64,
    pub beta: f64,
    pub grid_pairs_checked: usize,
    pub pair_mode: PairMode,
    pub l_p_witness: Option<PairWitness>,
    pub l_f_witness: Option<PairWitness>,
    pub theta_norm: String,
}

fn checked_pairs(family: &ParametricFamily, mode: PairMode) -> Result<Vec<(usize, usize, f64)>> {
    if family.grid_len() < 2 {
        return Err(Error::DegenerateGrid(format!(
            "{} grid point(s); Lipschitz estimates need at least 2",
            family.grid_len()
        )));
    }
    family
        .pairs(mode)
        .into_iter()
        .map(|(a, b)| {
            let d = family.distance(a, b);
            if d > 0.0 {
                Ok((a, b, d))
            } else {
                Err(Error::DegenerateGrid(format!("grid points {a} and {b} coincide")))
            }
        })
        .collect()
}

fn fold_max(items: Vec<(f64, PairWitness)>) -> (f64, Option<PairWitness>) {
    items
        .into_iter()
        .fold((0.0, None), |acc, (v, w)| if v > acc.0 { (v, Some(w)) } else { acc })
}

/// `L_P = max sigma_beta(P_theta delta_x, P_theta' delta_x) / (|theta - theta'| (1 + beta V(x)))`.
pub fn estimate_kernel_lipschitz(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    mode: PairMode,
) -> Result<(f64, Option<PairWitness>)> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, beta);
    let n = family.n_states();
    let per_pair = exec::map_indexed(pairs.len(), |p| {
        let (a, b, d) = pairs[p];
        let (ka, kb) = (family.kernel(a), family.kernel(b));
        let mut best = (
            0.0,
            PairWitness {
                theta_a: a,
                theta_b: b,
                state: None,
            },
        );
        for x in 0..n {
            let diff: Vec<f64> = ka.row(x).iter().zip(kb.row(x)).map(|(p, q)| p - q).collect();
            let r = wt.rho(&diff) / (d * wt.weights()[x]);
            if r > best.0 {
                best = (
                    r,
                    PairWitness {
                        theta_a: a,
                        theta_b: b,
                        state: Some(x),
                    },
                );
            }
        }
        best
    });
    Ok(fold_max(per_pair))
}

/// `L_f = max ||f_theta - f_theta'||_beta / |theta - theta'|`.
pub fn estimate_f_lipschitz(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    mode: PairMode,
) -> Result<(f64, Option<PairWitness>)> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, beta);
    let per_pair = exec::map_indexed(pairs.len(), |p| {
        let (a, b, d) = pairs[p];
        let diff = family.observable(a).sub(family.observable(b));
        (
            wt.sup(diff.values()) / d,
            PairWitness {
                theta_a: a,
                theta_b: b,
                state: None,
            },
        )
    });
    Ok(fold_max(per_pair))
}

pub fn k_f(family: &ParametricFamily, v: &Lyapunov, beta: WeightParam) -> f64 {
    let wt = Weighting::new(v, beta);
    exec::map_indexed(family.grid_len(), |t| wt.osc(family.observable(t).values()))
        .into_iter()
        .fold(0.0, f64::max)
}

pub fn fit_hypotheses(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    mode: PairMode,
) -> Result<LipschitzHypotheses> {
    let (l_p, l_p_witness) = estimate_kernel_lipschitz(family, v, beta, mode)?;
    let (l_f, l_f_witness) = estimate_f_lipschitz(family, v, beta, mode)?;
    Ok(LipschitzHypotheses {
        l_p,
        l_f,
        k_f: k_f(family, v, beta),
        beta: beta.get(),
        grid_pairs_checked: family.pairs(mode).len(),
        pair_mode: mode,
        l_p_witness,
        l_f_witness,
        theta_norm: "euclidean".into(),
    })
}

/// Summary of an empirical check over grid pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheckReport {
    pub check: String,
    pub pairs: usize,
    pub comparisons: usize,
    /// Largest `lhs / rhs` seen.
    pub tightness: f64,
    pub worst: Option<PairWitness>,
}

fn violated(check: &str, lhs: f64, rhs: f64, w: PairWitness, extra: String) -> Error {
    Error::ViolatedBound {
        check: check.to_string(),
        lhs,
        rhs,
        witness: format!(
            "grid points ({}, {}){}{}",
            w.theta_a,
            w.theta_b,
            w.state.map(|s| format!(", state {s}")).unwrap_or_default(),
            extra
        ),
    }
}

fn leq(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + tolerance::LIPSCHITZ * (1.0 + rhs.abs())
}

fn run_pairs<F>(check: &str, pairs: &[(usize, usize, f64)], per: F) -> Result<PairCheckReport>
where
    F: Fn(usize, usize, f64) -> Result<(f64, usize, Option<usize>)> + Sync + Send,
{
    let results = exec::try_map_indexed(pairs.len(), |p| {
        let (a, b, d) = pairs[p];
        per(a, b, d).map(|(t, c, s)| {
            (
                t,
                c,
                PairWitness {
                    theta_a: a,
                    theta_b: b,
                    state: s,
                },
            )
        })
    })?;
    let comparisons = results.iter().map(|r| r.1).sum();
    let (tightness, worst) = fold_max(results.into_iter().map(|(t, _, w)| (t, w)).collect());
    Ok(PairCheckReport {
        check: check.to_string(),
        pairs: pairs.len(),
        comparisons,
        tightness,
        worst,
    })
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Random `mu` and zero-mass `eta` against
/// `sigma(P_theta mu, P_theta' mu) <= L_P |dtheta| mu(1 + beta V)` and
/// `rho((P_theta - P_theta') eta) <= L_P |dtheta| |eta|(1 + beta V)`.
pub fn extend_to_measures_check(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    l_p: f64,
    trials: usize,
    seed: u64,
    mode: PairMode,
) -> Result<Vec<PairCheckReport>> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, beta);
    let n = family.n_states();
    let mut out = Vec::new();
    for signed in [false, true] {
        let check = if signed {
            "signed measures rho((P - P')eta) <= L_P |dtheta| |eta|(1 + beta V)"
        } else {
            "probability measures sigma(P mu, P' mu) <= L_P |dtheta| mu(1 + beta V)"
        };
        out.push(run_pairs(check, &pairs, |a, b, d| {
            let mut rng = sampling::rng_for(seed, (a as u64) << 32 | b as u64 | (signed as u64) << 63);
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let m = if signed {
                    sampling::zero_mass(&mut rng, n)
                } else {
                    sampling::probability(&mut rng, n)
                };
                let pa = family.kernel(a).push_slice(&m);
                let pb = family.kernel(b).push_slice(&m);
                let diff: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
                let lhs = wt.rho(&diff);
                let rhs = l_p * d * wt.rho(&m);
                if !leq(lhs, rhs) {
                    return Err(violated(
                        check,
                        lhs,
                        rhs,
                        PairWitness {
                            theta_a: a,
                            theta_b: b,
                            state: None,
                        },
                        format!(", trial {trial}, seed {seed}"),
                    ));
                }
                worst = worst.max(ratio(lhs, rhs));
            }
            Ok((worst, trials, None))
        })?);
    }
    Ok(out)
}

/// Bounds on `sigma_beta(P^n_theta mu, P^n_theta' mu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NStepBounds {
    pub l_p: f64,
    /// `(1 + beta K/(1 - gamma)) / (1 - alpha)`.
    pub l_p_prime: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl NStepBounds {
    /// `L_P |dtheta| (L_P' + alpha^n beta mu(V) / (alpha - gamma))`.
    pub fn general(&self, n: usize, dtheta: f64, mu_v: f64) -> f64 {
        self.l_p * dtheta * (self.l_p_prime + self.alpha.powi(n as i32) * self.beta * mu_v / (self.alpha - self.gamma))
    }

    /// `L_P |dtheta| n alpha^{n-1} |eta|(1 + beta V)` for zero-mass `eta`.
    pub fn zero_mass(&self, n: usize, dtheta: f64, eta_weighted: f64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.l_p * dtheta * n as f64 * self.alpha.powi(n as i32 - 1) * eta_weighted
    }

    /// `n -> infinity` limit of [`Self::general`]: `L_P L_P' |dtheta|`.
    pub fn invariant(&self, dtheta: f64) -> f64 {
        self.l_p * self.l_p_prime * dtheta
    }
}

pub fn l_p_prime(cc: &ContractionConstants, drift: &DriftCertificate) -> f64 {
    (1.0 + cc.beta * drift.k / (1.0 - drift.gamma)) / (1.0 - cc.alpha)
}

pub fn nstep_bounds(cc: &ContractionConstants, drift: &DriftCertificate, l_p: f64) -> Result<NStepBounds> {
    if !(cc.alpha > drift.gamma) {
        return Err(Error::param("alpha", cc.alpha, "n-step bounds need alpha > gamma"));
    }
    Ok(NStepBounds {
        l_p,
        l_p_prime: l_p_prime(cc, drift),
        alpha: cc.alpha,
        gamma: drift.gamma,
        beta: cc.beta,
    })
}

/// Compares `sigma_beta(P^n_theta m, P^n_theta' m)` against the general
/// bound (probability `m`) and the zero-mass bound for `n = 1..=n_max`.
pub fn nstep_empirical_check(
    family: &ParametricFamily,
    v: &Lyapunov,
    bounds: &NStepBounds,
    n_max: usize,
    trials: usize,
    seed: u64,
    mode: PairMode,
) -> Result<Vec<PairCheckReport>> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, WeightParam::new(bounds.beta)?);
    let n = family.n_states();
    let mut out = Vec::new();
    for signed in [false, true] {
        let check = if signed {
            "n-step zero-mass sigma(P^n eta, P'^n eta) <= L_P |dtheta| n alpha^(n-1) |eta|(1 + beta V)"
        } else {
            "n-step sigma(P^n mu, P'^n mu) <= L_P |dtheta| (L_P' + alpha^n beta mu(V)/(alpha - gamma))"
        };
        out.push(run_pairs(check, &pairs, |a, b, d| {
            let mut rng = sampling::rng_for(seed ^ 0x5eed, (a as u64) << 32 | b as u64 | (signed as u64) << 63);
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let m = if signed {
                    sampling::zero_mass(&mut rng, n)
                } else {
                    sampling::probability(&mut rng, n)
                };
                let mu_v: f64 = m.iter().zip(v.values()).map(|(x, y)| x * y).sum();
                let weighted = wt.rho(&m);
                let (mut pa, mut pb) = (m.clone(), m.clone());
                for step in 1..=n_max {
                    pa = family.kernel(a).push_slice(&pa);
                    pb = family.kernel(b).push_slice(&pb);
                    let diff: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
                    let lhs = wt.rho(&diff);
                    let rhs = if signed {
                        bounds.zero_mass(step, d, weighted)
                    } else {
                        bounds.general(step, d, mu_v)
                    };
                    if !leq(lhs, rhs) {
                        return Err(violated(
                            check,
                            lhs,
                            rhs,
                            PairWitness {
                                theta_a: a,
                                theta_b: b,
                                state: None,
                            },
                            format!(", n = {step}, trial {trial}, seed {seed}"),
                        ));
                    }
                    worst = worst.max(ratio(lhs, rhs));
                }
            }
            Ok((worst, trials * n_max, None))
        })?);
    }
    Ok(out)
}

/// `sigma_beta(mu*_theta, mu*_theta') <= L_P L_P' |theta - theta'|` on grid pairs.
pub fn invariant_measure_check(
    family: &ParametricFamily,
    v: &Lyapunov,
    mus: &[Measure],
    bounds: &NStepBounds,
    mode: PairMode,
) -> Result<PairCheckReport> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, WeightParam::new(bounds.beta)?);
    let check = "sigma(mu*_theta, mu*_theta') <= L_P L_P' |dtheta|";
    run_pairs(check, &pairs, |a, b, d| {
        let diff = mus[a].minus(&mus[b]);
        let lhs = wt.rho(diff.weights());
        let rhs = bounds.invariant(d);
        if !leq(lhs, rhs) {
            return Err(violated(
                check,
                lhs,
                rhs,
                PairWitness {
                    theta_a: a,
                    theta_b: b,
                    state: None,
                },
                String::new(),
            ));
        }
        Ok((ratio(lhs, rhs), 1, None))
    })
}

/// One named constant with the formula it was evaluated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub name: String,
    pub formula: String,
    pub value: f64,
}

fn constant(name: &str, formula: &str, value: f64) -> Constant {
    Constant {
        name: name.into(),
        formula: formula.into(),
        value,
    }
}

/// Note attached to every report using the `1/(1 - alpha)` factors.
pub const RECIPROCAL_NOTE: &str =
    "the factor multiplying L_P K_f in L_h and in L_P' is read as 1/(1-alpha), consistent with the derivation of L_h";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBounds {
    pub l_p_prime: f64,
    pub l_h: f64,
    pub l_u1: f64,
    pub l_u2: f64,
    pub l_u: f64,
    pub constants: Vec<Constant>,
    pub note: String,
}

pub fn theoretical_constants(
    cc: &ContractionConstants,
    drift: &DriftCertificate,
    hyp: &LipschitzHypotheses,
) -> LipschitzBounds {
    one_step_constants(cc.alpha, cc.beta, drift.k, drift.gamma, hyp.l_p, hyp.l_f, hyp.k_f)
}

fn one_step_constants(alpha: f64, beta: f64, k: f64, gamma: f64, l_p: f64, l_f: f64, k_f: f64) -> LipschitzBounds {
    let s = beta * k / (1.0 - gamma);
    let om = 1.0 - alpha;
    let l_p_prime = (1.0 + s) / om;
    let l_h = (l_f + l_p * k_f / om) * (1.0 + s);
    let l_u1 = l_f / om + l_p * k_f / (om * om);
    let l_u2 = l_f / om + 2.0 * l_p * k_f / (om * om);
    let l_u = l_u2 * (2.0 + s);
    LipschitzBounds {
        l_p_prime,
        l_h,
        l_u1,
        l_u2,
        l_u,
        constants: vec![
            constant("L_P'", "(1 + beta K/(1-gamma)) / (1-alpha)", l_p_prime),
            constant("L_h", "(L_f + L_P K_f/(1-alpha)) (1 + beta K/(1-gamma))", l_h),
            constant("L_u1", "L_f/(1-alpha) + L_P K_f/(1-alpha)^2", l_u1),
            constant("L_u2", "L_f/(1-alpha) + 2 L_P K_f/(1-alpha)^2", l_u2),
            constant("L_u", "L_u2 (2 + beta K/(1-gamma))", l_u),
        ],
        note: RECIPROCAL_NOTE.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub theta_a: usize,
    pub theta_b: usize,
    pub distance: f64,
    pub h_gap: f64,
    /// `|h_a - h_b| / (L_h |dtheta|)`.
    pub h_tightness: f64,
    /// `max_x |u_a(x) - u_b(x)| / (L_u (1 + beta V(x)) |dtheta|)`.
    pub u_tightness: f64,
    pub u_worst_state: usize,
    /// `||u_a - u_b||_beta / |dtheta|`.
    pub u_beta_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub l_h: f64,
    pub l_u: f64,
    pub pairs: Vec<PairResult>,
    pub max_h_tightness: f64,
    pub max_u_tightness: f64,
    /// Largest finite-difference slope of `h` between adjacent grid points.
    pub max_h_slope: f64,
}

/// Checks `|h_a - h_b| <= L_h |dtheta|` and
/// `|u_a(x) - u_b(x)| <= L_u (1 + beta V(x)) |dtheta|` on every checked pair.
pub fn empirical_certify(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    l_h: f64,
    l_u: f64,
    solutions: &[PoissonSolution],
    mode: PairMode,
) -> Result<EmpiricalReport> {
    if solutions.len() != family.grid_len() {
        return Err(Error::DimensionMismatch {
            context: "solutions per grid point",
            expected: family.grid_len(),
            found: solutions.len(),
        });
    }
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, beta);
    let results = exec::try_map_indexed(pairs.len(), |p| {
        let (a, b, d) = pairs[p];
        let w = PairWitness {
            theta_a: a,
            theta_b: b,
            state: None,
        };
        let h_gap = (solutions[a].h - solutions[b].h).abs();
        if !leq(h_gap, l_h * d) {
            return Err(violated(
                "|h_a - h_b| <= L_h |dtheta|",
                h_gap,
                l_h * d,
                w,
                String::new(),
            ));
        }
        let du = solutions[a].u.sub(&solutions[b].u);
        let mut u_t = 0.0f64;
        let mut u_state = 0;
        for (x, (dux, wx)) in du.values().iter().zip(wt.weights()).enumerate() {
            let rhs = l_u * wx * d;
            if !leq(dux.abs(), rhs) {
                return Err(violated(
                    "|u_a(x) - u_b(x)| <= L_u (1 + beta V(x)) |dtheta|",
                    dux.abs(),
                    rhs,
                    PairWitness { state: Some(x), ..w },
                    String::new(),
                ));
            }
            let t = ratio(dux.abs(), rhs);
            if t > u_t {
                u_t = t;
                u_state = x;
            }
        }
        Ok(PairResult {
            theta_a: a,
            theta_b: b,
            distance: d,
            h_gap,
            h_tightness: ratio(h_gap, l_h * d),
            u_tightness: u_t,
            u_worst_state: u_state,
            u_beta_slope: wt.sup(du.values()) / d,
        })
    })?;
    let max_h_slope = family
        .pairs(PairMode::Adjacent)
        .into_iter()
        .map(|(a, b)| (solutions[a].h - solutions[b].h).abs() / family.distance(a, b))
        .filter(|s| s.is_finite())
        .fold(0.0, f64::max);
    Ok(EmpiricalReport {
        l_h,
        l_u,
        max_h_tightness: results.iter().map(|r| r.h_tightness).fold(0.0, f64::max),
        max_u_tightness: results.iter().map(|r| r.u_tightness).fold(0.0, f64::max),
        pairs: results,
        max_h_slope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedBounds {
    pub r: usize,
    pub alpha_doubleprime: f64,
    pub l_p_doubleprime: f64,
    /// Kernel constant of the r-step family.
    pub l_p_r: f64,
    pub l_rh: f64,
    /// `L_u` of the r-step equation.
    pub l_u_r: f64,
    /// `K_u` of the r-step equation.
    pub k_u_r: f64,
    pub l_ru: f64,
    pub constants: Vec<Constant>,
    pub note: String,
}

/// Default multiplier turning `alpha'` into `alpha''`.
pub const ALPHA_DOUBLEPRIME_FACTOR: f64 = 1.05;

/// `L_P'' = L_P max(1/(a''-1) + beta K_1/((g_1-1)(a''-g_1)), 1/(a''-g_1))`,
/// obtained by bounding the three geometric sums by their limits.
pub fn l_p_doubleprime(l_p: f64, beta: f64, gamma_1: f64, k_1: f64, alpha_dd: f64) -> f64 {
    let a = 1.0 / (alpha_dd - 1.0) + beta * k_1 / ((gamma_1 - 1.0) * (alpha_dd - gamma_1));
    let b = 1.0 / (alpha_dd - gamma_1);
    l_p * a.max(b)
}

/// Constants of the relaxed theory. `L_{P^r}` is estimated on the r-step
/// kernels with the same pair mode as `hyp`.
pub fn relaxed_constants(
    family: &ParametricFamily,
    v: &Lyapunov,
    rcert: &RStepCertificate,
    hyp: &LipschitzHypotheses,
    alpha_dd: Option<f64>,
) -> Result<RelaxedBounds> {
    let alpha_dd = alpha_dd.unwrap_or(rcert.alpha_prime * ALPHA_DOUBLEPRIME_FACTOR);
    if !(alpha_dd > rcert.alpha_prime) {
        return Err(Error::param(
            "alpha''",
            alpha_dd,
            format!("must exceed alpha' = {}", rcert.alpha_prime),
        ));
    }
    if (hyp.beta - rcert.beta).abs() > 1e-12 * rcert.beta {
        return Err(Error::param(
            "beta",
            hyp.beta,
            "hypotheses were fitted with a different beta",
        ));
    }
    let beta = rcert.weight();
    let l_p_r = if rcert.r == 1 {
        hyp.l_p
    } else {
        estimate_kernel_lipschitz(&family.powered(rcert.r), v, beta, hyp.pair_mode)?.0
    };
    Ok(relaxed_from(rcert, hyp, l_p_r, alpha_dd))
}

pub fn relaxed_from(rcert: &RStepCertificate, hyp: &LipschitzHypotheses, l_p_r: f64, alpha_dd: f64) -> RelaxedBounds {
    let beta = rcert.beta;
    let (g1, k1, r) = (rcert.gamma_1, rcert.k_1, rcert.r);
    let inner = one_step_constants(rcert.alpha_r, beta, rcert.k_r, rcert.gamma_r, l_p_r, hyp.l_f, hyp.k_f);
    let l_rh = inner.l_h;
    let l_u_r = inner.l_u;
    let k_u_r = k_u(rcert.alpha_r, beta, rcert.k_r, rcert.gamma_r);
    let l_pdd = l_p_doubleprime(hyp.l_p, beta, g1, k1, alpha_dd);
    let mut growth_sum = 1.0;
    let mut power_sum = 0.0;
    for m in 1..r {
        let gm = g1.powi(m as i32);
        growth_sum += (1.0 + beta * gm * k1 / (g1 - 1.0)).max(gm);
        power_sum += alpha_dd.powi(m as i32);
    }
    let l_ru = l_u_r * growth_sum + l_pdd * k_u_r * hyp.k_f * power_sum;
    RelaxedBounds {
        r,
        alpha_doubleprime: alpha_dd,
        l_p_doubleprime: l_pdd,
        l_p_r,
        l_rh,
        l_u_r,
        k_u_r,
        l_ru,
        constants: vec![
            constant("alpha''", "alpha' * 1.05 unless supplied", alpha_dd),
            constant(
                "L_P''",
                "L_P max(1/(alpha''-1) + beta K_1/((gamma_1-1)(alpha''-gamma_1)), 1/(alpha''-gamma_1))",
                l_pdd,
            ),
            constant("L_{P^r}", "estimated on the r-step kernels", l_p_r),
            constant("L_{r,h}", "(L_f + L_{P^r} K_f/(1-alpha_r)) (1 + beta K_r/(1-gamma_r))", l_rh),
            constant("K_u^(r)", "(2 + beta K_r/(1-gamma_r)) / (1-alpha_r)", k_u_r),
            constant(
                "L_u^(r)",
                "(L_f/(1-alpha_r) + 2 L_{P^r} K_f/(1-alpha_r)^2) (2 + beta K_r/(1-gamma_r))",
                l_u_r,
            ),
            constant(
                "L_{r,u}",
                "L_u^(r) [1 + sum_{m=1}^{r-1} max(1 + beta gamma_1^m K_1/(gamma_1-1), gamma_1^m)] + L_P'' K_u^(r) K_f sum_{m=1}^{r-1} alpha''^m",
                l_ru,
            ),
        ],
        note: RECIPROCAL_NOTE.into(),
    }
}

/// Checks `sigma(P^n_theta mu, P^n_theta' mu) <= L_P'' |dtheta| alpha''^n (1 + beta mu(V))`.
#[allow(clippy::too_many_arguments)]
pub fn relaxed_nstep_check(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    relaxed: &RelaxedBounds,
    n_max: usize,
    trials: usize,
    seed: u64,
    mode: PairMode,
) -> Result<PairCheckReport> {
    let pairs = checked_pairs(family, mode)?;
    let wt = Weighting::new(v, beta);
    let n = family.n_states();
    let check = "sigma(P^n mu, P'^n mu) <= L_P'' |dtheta| alpha''^n (1 + beta mu(V))";
    run_pairs(check, &pairs, |a, b, d| {
        let mut rng = sampling::rng_for(seed ^ 0xa11a, (a as u64) << 32 | b as u64);
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let m = sampling::probability(&mut rng, n);
            let weighted = wt.rho(&m);
            let (mut pa, mut pb) = (m.clone(), m);
            for step in 1..=n_max {
                pa = family.kernel(a).push_slice(&pa);
                pb = family.kernel(b).push_slice(&pb);
                let diff: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
                let lhs = wt.rho(&diff);
                let rhs = relaxed.l_p_doubleprime * d * relaxed.alpha_doubleprime.powi(step as i32) * weighted;
                if !leq(lhs, rhs) {
                    return Err(violated(
                        check,
                        lhs,
                        rhs,
                        PairWitness {
                            theta_a: a,
                            theta_b: b,
                            state: None,
                        },
                        format!(", n = {step}, trial {trial}"),
                    ));
                }
                worst = worst.max(ratio(lhs, rhs));
            }
        }
        Ok((worst, trials * n_max, None))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{Kernel, Observable, StateSpace};

    fn interp_family(grid: &[f64]) -> (ParametricFamily, Kernel, Kernel) {
        let p0 = Kernel::from_rows(vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.5, 0.3], vec![0.0, 0.6, 0.4]]).unwrap();
        let p1 = Kernel::from_rows(vec![vec![0.5, 0.3, 0.2], vec![0.4, 0.4, 0.2], vec![0.3, 0.3, 0.4]]).unwrap();
        let kernels = grid
            .iter()
            .map(|&t| {
                Kernel::from_rows(
                    (0..3)
                        .map(|i| (0..3).map(|j| (1.0 - t) * p0.get(i, j) + t * p1.get(i, j)).collect())
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let fs = grid
            .iter()
            .map(|&t| Observable::new(vec![1.0, 2.0 + t, -t]).unwrap())
            .collect();
        let fam = ParametricFamily::new(
            StateSpace::new(3).unwrap(),
            grid.iter().map(|&t| vec![t]).collect(),
            kernels,
            fs,
        )
        .unwrap();
        (fam, p0, p1)
    }

    #[test]
    fn constant_family_has_zero_constant() {
        let k = Kernel::from_rows(vec![vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let f = Observable::new(vec![0.0, 1.0]).unwrap();
        let fam = ParametricFamily::new(
            StateSpace::new(2).unwrap(),
            vec![vec![0.0], vec![0.5], vec![1.0]],
            vec![k.clone(), k.clone(), k],
            vec![f.clone(), f.clone(), f],
        )
        .unwrap();
        let v = Lyapunov::new(vec![0.0, 1.0]).unwrap();
        let b = WeightParam::new(0.3).unwrap();
        assert_eq!(estimate_kernel_lipschitz(&fam, &v, b, PairMode::All).unwrap().0, 0.0);
        assert_eq!(estimate_f_lipschitz(&fam, &v, b, PairMode::All).unwrap().0, 0.0);
    }

    #[test]
    fn linear_interpolation_closed_form_and_refinement() {
        let v = Lyapunov::new(vec![0.0, 1.0, 3.0]).unwrap();
        let b = WeightParam::new(0.4).unwrap();
        let (coarse, p0, p1) = interp_family(&[0.0, 0.5, 1.0]);
        let wt = Weighting::new(&v, b);
        let expect = (0..3)
            .map(|x| {
                let d: Vec<f64> = p1.row(x).iter().zip(p0.row(x)).map(|(a, c)| a - c).collect();
                wt.rho(&d) / wt.weights()[x]
            })
            .fold(0.0, f64::max);
        let est = estimate_kernel_lipschitz(&coarse, &v, b, PairMode::Adjacent).unwrap().0;
        assert!((est - expect).abs() < 1e-9);
        let fine_grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let (fine, _, _) = interp_family(&fine_grid);
        let est_fine = estimate_kernel_lipschitz(&fine, &v, b, PairMode::Adjacent).unwrap().0;
        assert!((est - est_fine).abs() < 1e-9);
    }

    #[test]
    fn reparametrisation_scales_constant() {
        let v = Lyapunov::new(vec![0.0, 1.0, 3.0]).unwrap();
        let b = WeightParam::new(0.4).unwrap();
        let (fam, _, _) = interp_family(&[0.0, 0.3, 1.0]);
        let scaled = ParametricFamily::new(
            fam.space().clone(),
            fam.thetas().iter().map(|t| vec![3.0 * t[0]]).collect(),
            fam.kernels().to_vec(),
            fam.observables().to_vec(),
        )
        .unwrap();
        let a = estimate_kernel_lipschitz(&fam, &v, b, PairMode::All).unwrap().0;
        let c = estimate_kernel_lipschitz(&scaled, &v, b, PairMode::All).unwrap().0;
        assert!((a / 3.0 - c).abs() < 1e-14);
    }

    #[test]
    fn degenerate_grids_rejected() {
        let (fam, _, _) = interp_family(&[0.2, 0.2]);
        let v = Lyapunov::new(vec![0.0, 1.0, 3.0]).unwrap();
        let b = WeightParam::new(0.4).unwrap();
        assert!(matches!(
            estimate_kernel_lipschitz(&fam, &v, b, PairMode::All),
            Err(Error::DegenerateGrid(_))
        ));
        let (one, _, _) = interp_family(&[0.2]);
        assert!(estimate_kernel_lipschitz(&one, &v, b, PairMode::All).is_err());
    }

    #[test]
    fn constants_arithmetic() {
        let b = one_step_constants(59.0 / 60.0, 0.2, 1.0, 0.5, 0.0, 1.0, 1.0);
        assert!((b.l_h - 1.4).abs() < 1e-12);
        let z = one_step_constants(0.9, 0.2, 1.0, 0.5, 0.0, 0.0, 1.0);
        assert_eq!((z.l_h, z.l_u), (0.0, 0.0));
        let c = one_step_constants(59.0 / 60.0, 0.2, 1.0, 0.5, 0.7, 0.0, 2.0);
        assert!(c.l_u >= c.l_h * 2.0 / (1.0 - 59.0 / 60.0));
        assert!(c.l_u1 <= c.l_u2);
    }

    #[test]
    fn nstep_limits() {
        let nb = NStepBounds {
            l_p: 2.0,
            l_p_prime: 5.0,
            alpha: 0.9,
            gamma: 0.5,
            beta: 0.1,
        };
        assert_eq!(nb.zero_mass(0, 1.0, 3.0), 0.0);
        assert!((nb.general(10_000, 0.5, 4.0) - nb.invariant(0.5)).abs() < 1e-12);
        // n alpha^(n-1) peaks near -1/ln(alpha) ~ 9.5
        let vals: Vec<f64> = (1..40).map(|n| nb.zero_mass(n, 1.0, 1.0)).collect();
        let peak = vals
            .iter()
            .enumerate()
            .fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i + 1, v) } else { a });
        assert!(peak.0 == 9 || peak.0 == 10);
        assert!(vals[0] < peak.1 && vals[38] < peak.1);
    }

    #[test]
    fn l_p_doubleprime_decreases_with_gap() {
        let a = l_p_doubleprime(1.0, 0.2, 1.05, 0.5, 1.2);
        let b = l_p_doubleprime(1.0, 0.2, 1.05, 0.5, 1.4);
        assert!(b < a);
    }
}

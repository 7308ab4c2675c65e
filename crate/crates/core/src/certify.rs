//! Drift, minorization and growth certificates, and the contraction
//! constants they imply.
//!
//! Every certificate is re-verified against the full grid when it is built;
//! a constructor either returns a certificate whose inequalities hold within
//! the declared tolerance or an error naming the violating state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::norms::{WeightParam, Weighting};
use crate::pwl::{self, Line};
use crate::sampling;
use crate::statespace::{Kernel, Lyapunov, ParametricFamily};
use crate::tolerance;

/// How a constant in a report was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fitted,
    User,
    Defaulted,
    Derived,
}

/// Location of the tightest inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackWitness {
    pub theta_index: usize,
    pub state: usize,
    pub slack: f64,
}

/// `P*_theta V <= gamma V + K` on every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub gamma: f64,
    pub k: f64,
    /// `gamma V + K - P*V` per grid point and state.
    pub slack: Vec<Vec<f64>>,
    pub worst: SlackWitness,
    /// Largest `P*V / V` over the upper tail of V (the infeasibility proxy).
    pub tail_ratio: f64,
    pub provenance: Provenance,
    pub grid_hash: String,
}

/// Options for [`fit_drift_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftOptions {
    /// States with `V >= tail_fraction * max V` form the tail probed for
    /// `P*V / V >= 1`.
    pub tail_fraction: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for DriftOptions {
    fn default() -> Self {
        Self {
            tail_fraction: 0.5,
            gamma_min: tolerance::GAMMA_MARGIN,
            gamma_max: 1.0 - tolerance::GAMMA_MARGIN,
        }
    }
}

struct DriftData {
    /// `(P*V, V)` per grid point.
    pv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DriftData {
    fn new(kernels: &[&Kernel], vs: &[&[f64]]) -> Self {
        let pv = exec::map_indexed(kernels.len(), |t| (kernels[t].apply_slice(vs[t]), vs[t].to_vec()));
        Self { pv }
    }

    fn tail_ratio(&self, fraction: f64) -> (f64, usize, usize) {
        let mut best = (0.0, 0, 0);
        for (t, (pv, v)) in self.pv.iter().enumerate() {
            let vmax = v.iter().copied().fold(0.0, f64::max);
            if vmax <= 0.0 {
                continue;
            }
            for (x, (&c, &vx)) in pv.iter().zip(v).enumerate() {
                if vx > 0.0 && vx >= fraction * vmax {
                    let r = c / vx;
                    if r > best.0 {
                        best = (r, t, x);
                    }
                }
            }
        }
        best
    }

    fn k_for(&self, gamma: f64) -> f64 {
        self.pv
            .iter()
            .flat_map(|(pv, v)| pv.iter().zip(v).map(move |(c, vx)| c - gamma * vx))
            .fold(0.0, f64::max)
    }
}

/// Fits `(gamma, K)` for a single Lyapunov function shared by all grid points.
pub fn fit_drift(family: &ParametricFamily, v: &Lyapunov) -> Result<DriftCertificate> {
    fit_drift_with(family, v, DriftOptions::default())
}

pub fn fit_drift_with(family: &ParametricFamily, v: &Lyapunov, opts: DriftOptions) -> Result<DriftCertificate> {
    check_v(family, v)?;
    let kernels: Vec<&Kernel> = family.kernels().iter().collect();
    let vs = vec![v.values(); kernels.len()];
    let (gamma, k, tail) = fit_joint(&kernels, &vs, opts)?;
    let mut cert = verify_drift(family, v, gamma, k, Provenance::Fitted)?;
    cert.tail_ratio = tail;
    Ok(cert)
}

/// Joint fit of `P_t* V_t <= gamma V_t + K` over pairs `(P_t, V_t)`.
///
/// On the frontier of feasible pairs the fit picks the one minimising
/// `K / (1 - gamma)`, the quantity that enters every downstream bound.
/// Substituting `s = 1 / (1 - gamma)` turns the objective into
/// `max(0, max_{t,x} (c - V) s + V)` with `c = P*V`, a convex piecewise-linear
/// function of `s` minimised exactly.
pub(crate) fn fit_joint(kernels: &[&Kernel], vs: &[&[f64]], opts: DriftOptions) -> Result<(f64, f64, f64)> {
    if !(0.0 < opts.tail_fraction && opts.tail_fraction <= 1.0) {
        return Err(Error::param("tail_fraction", opts.tail_fraction, "must lie in (0, 1]"));
    }
    if !(0.0 < opts.gamma_min && opts.gamma_min < opts.gamma_max && opts.gamma_max < 1.0) {
        return Err(Error::param(
            "gamma_max",
            opts.gamma_max,
            "need 0 < gamma_min < gamma_max < 1",
        ));
    }
    let data = DriftData::new(kernels, vs);
    let (ratio, t, x) = data.tail_ratio(opts.tail_fraction);
    if ratio >= 1.0 {
        return Err(Error::InfeasibleDrift {
            ratio,
            theta_index: t,
            state: x,
        });
    }
    let mut lines = vec![Line::new(0.0, 0.0)];
    for (pv, v) in &data.pv {
        for (&c, &vx) in pv.iter().zip(v) {
            lines.push(Line::new(c - vx, vx));
        }
    }
    let s_lo = 1.0 / (1.0 - opts.gamma_min);
    let s_hi = 1.0 / (1.0 - opts.gamma_max);
    let (s, _) = pwl::minimize_max(&lines, s_lo, s_hi);
    let gamma = (1.0 - 1.0 / s).clamp(opts.gamma_min, opts.gamma_max);
    let k = data.k_for(gamma);
    Ok((gamma, k, ratio))
}

fn check_v(family: &ParametricFamily, v: &Lyapunov) -> Result<()> {
    if v.len() != family.n_states() {
        return Err(Error::DimensionMismatch {
            context: "lyapunov",
            expected: family.n_states(),
            found: v.len(),
        });
    }
    Ok(())
}

fn drift_slack(kernels: &[Kernel], vs: &[&[f64]], gamma: f64, k: f64) -> Vec<Vec<f64>> {
    exec::map_indexed(kernels.len(), |t| {
        let pv = kernels[t].apply_slice(vs[t]);
        pv.iter().zip(vs[t]).map(|(c, vx)| gamma * vx + k - c).collect()
    })
}

fn worst_of(slack: &[Vec<f64>]) -> SlackWitness {
    let mut w = SlackWitness {
        theta_index: 0,
        state: 0,
        slack: f64::INFINITY,
    };
    for (t, row) in slack.iter().enumerate() {
        for (x, &s) in row.iter().enumerate() {
            if s < w.slack {
                w = SlackWitness {
                    theta_index: t,
                    state: x,
                    slack: s,
                };
            }
        }
    }
    w
}

/// Checks given `(gamma, K)` on the whole grid and wraps them as a certificate.
pub fn verify_drift(
    family: &ParametricFamily,
    v: &Lyapunov,
    gamma: f64,
    k: f64,
    provenance: Provenance,
) -> Result<DriftCertificate> {
    check_v(family, v)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", gamma, "drift rate must lie in (0, 1)"));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::param("K", k, "drift constant must be finite and nonnegative"));
    }
    let vs = vec![v.values(); family.grid_len()];
    let slack = drift_slack(family.kernels(), &vs, gamma, k);
    let worst = worst_of(&slack);
    if worst.slack < -tolerance::DRIFT {
        return Err(violation("drift P*V <= gamma V + K", &worst, gamma, k));
    }
    let data = DriftData::new(&family.kernels().iter().collect::<Vec<_>>(), &vs);
    Ok(DriftCertificate {
        gamma,
        k,
        slack,
        worst,
        tail_ratio: data.tail_ratio(DriftOptions::default().tail_fraction).0,
        provenance,
        grid_hash: family.grid_hash(),
    })
}

fn violation(check: &str, w: &SlackWitness, gamma: f64, k: f64) -> Error {
    Error::ViolatedBound {
        check: check.to_string(),
        lhs: -w.slack,
        rhs: 0.0,
        witness: format!(
            "grid point {}, state {}, gamma = {gamma}, K = {k}",
            w.theta_index, w.state
        ),
    }
}

impl DriftCertificate {
    /// `K / (1 - gamma)`, the bound on `mu*(V)`.
    pub fn stationary_bound(&self) -> f64 {
        self.k / (1.0 - self.gamma)
    }

    /// Smallest admissible small-set radius `2K / (1 - gamma)`.
    pub fn radius_floor(&self) -> f64 {
        2.0 * self.stationary_bound()
    }

    /// `2K/(1 - gamma) * (1 + margin)`; positive even when K = 0.
    pub fn default_radius(&self, margin: f64) -> f64 {
        let k = self.k.max(tolerance::K_FLOOR);
        2.0 * k / (1.0 - self.gamma) * (1.0 + margin)
    }
}

/// `P_theta(x, .) >= alpha_bar mu_bar` for `x` in `C = {V <= R}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinorizationCertificate {
    pub radius: f64,
    pub small_set: Vec<usize>,
    pub alpha_bar: f64,
    pub mu_bar: Vec<f64>,
    pub worst: SlackWitness,
    pub provenance: Provenance,
    pub grid_hash: String,
}

pub const DEFAULT_RADIUS_MARGIN: f64 = 0.25;

pub fn fit_minorization(
    family: &ParametricFamily,
    v: &Lyapunov,
    drift: &DriftCertificate,
    radius: f64,
) -> Result<MinorizationCertificate> {
    check_v(family, v)?;
    if !(radius > drift.radius_floor()) || !radius.is_finite() {
        return Err(Error::param(
            "R",
            radius,
            format!("must exceed 2K/(1-gamma) = {}", drift.radius_floor()),
        ));
    }
    let small_set: Vec<usize> = (0..v.len()).filter(|&x| v.values()[x] <= radius).collect();
    if small_set.is_empty() {
        return Err(Error::EmptySmallSet { radius });
    }
    let n = family.n_states();
    let mut floor = vec![f64::INFINITY; n];
    for kern in family.kernels() {
        for &x in &small_set {
            for (m, p) in floor.iter_mut().zip(kern.row(x)) {
                *m = m.min(*p);
            }
        }
    }
    let alpha_bar: f64 = floor.iter().sum();
    if alpha_bar <= 0.0 {
        return Err(Error::ZeroMinorization);
    }
    let alpha_bar = alpha_bar.min(1.0);
    let mu_bar: Vec<f64> = floor.iter().map(|m| m / floor.iter().sum::<f64>()).collect();

    let mut worst = SlackWitness {
        theta_index: 0,
        state: small_set[0],
        slack: f64::INFINITY,
    };
    for (t, kern) in family.kernels().iter().enumerate() {
        for &x in &small_set {
            for (j, p) in kern.row(x).iter().enumerate() {
                let s = p - alpha_bar * mu_bar[j];
                if s < worst.slack {
                    worst = SlackWitness {
                        theta_index: t,
                        state: x,
                        slack: s,
                    };
                }
            }
        }
    }
    if worst.slack < -tolerance::MINORIZATION {
        return Err(Error::ViolatedBound {
            check: "minorization P(x, .) >= alpha_bar mu_bar".into(),
            lhs: -worst.slack,
            rhs: 0.0,
            witness: format!("grid point {}, state {}", worst.theta_index, worst.state),
        });
    }
    Ok(MinorizationCertificate {
        radius,
        small_set,
        alpha_bar,
        mu_bar,
        worst,
        provenance: Provenance::Fitted,
        grid_hash: family.grid_hash(),
    })
}

/// The free parameters and resulting contraction rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub alpha0: f64,
    pub gamma0: f64,
    pub beta: f64,
    pub alpha: f64,
    /// `1 - (alpha_bar - alpha0)`.
    pub alpha_minorization_branch: f64,
    /// `(2 + R beta gamma0) / (2 + R beta)`.
    pub alpha_drift_branch: f64,
    /// Drift constant K as certified.
    pub k_drift: f64,
    /// The K actually divided by; differs from `k_drift` when that is zero.
    pub k_used: f64,
    pub k_floored: bool,
    pub gamma: f64,
    pub radius: f64,
    pub alpha0_provenance: Provenance,
    pub gamma0_provenance: Provenance,
}

impl ContractionConstants {
    pub fn weight(&self) -> WeightParam {
        WeightParam::new(self.beta).expect("beta validated at construction")
    }
}

pub fn hm_constants(
    drift: &DriftCertificate,
    minor: &MinorizationCertificate,
    alpha0: f64,
    gamma0: f64,
) -> Result<ContractionConstants> {
    hm_constants_tagged(drift, minor, alpha0, gamma0, Provenance::User, Provenance::User)
}

fn hm_constants_tagged(
    drift: &DriftCertificate,
    minor: &MinorizationCertificate,
    alpha0: f64,
    gamma0: f64,
    p_alpha0: Provenance,
    p_gamma0: Provenance,
) -> Result<ContractionConstants> {
    let (gamma, r, abar) = (drift.gamma, minor.radius, minor.alpha_bar);
    if !(alpha0 > 0.0 && alpha0 < abar) {
        return Err(Error::param(
            "alpha0",
            alpha0,
            format!("must lie in (0, alpha_bar = {abar})"),
        ));
    }
    let (k_used, k_floored) = if drift.k > 0.0 {
        (drift.k, false)
    } else {
        (tolerance::K_FLOOR, true)
    };
    let g_lo = gamma + 2.0 * drift.k / r;
    if !(gamma0 > g_lo && gamma0 < 1.0) {
        return Err(Error::param("gamma0", gamma0, format!("must lie in ({g_lo}, 1)")));
    }
    let beta = alpha0 / k_used;
    let a1 = 1.0 - (abar - alpha0);
    let a2 = (2.0 + r * beta * gamma0) / (2.0 + r * beta);
    let alpha = a1.max(a2);
    if !(alpha > gamma && alpha < 1.0) {
        return Err(Error::Postcondition {
            what: "hm_constants",
            detail: format!("alpha = {alpha} outside (gamma = {gamma}, 1)"),
        });
    }
    Ok(ContractionConstants {
        alpha0,
        gamma0,
        beta,
        alpha,
        alpha_minorization_branch: a1,
        alpha_drift_branch: a2,
        k_drift: drift.k,
        k_used,
        k_floored,
        gamma,
        radius: r,
        alpha0_provenance: p_alpha0,
        gamma0_provenance: p_gamma0,
    })
}

/// Midpoints of the admissible intervals for `alpha0` and `gamma0`.
pub fn hm_constants_default(drift: &DriftCertificate, minor: &MinorizationCertificate) -> Result<ContractionConstants> {
    let alpha0 = minor.alpha_bar / 2.0;
    let gamma0 = (drift.gamma + 2.0 * drift.k / minor.radius + 1.0) / 2.0;
    hm_constants_tagged(
        drift,
        minor,
        alpha0,
        gamma0,
        Provenance::Defaulted,
        Provenance::Defaulted,
    )
}

/// Grid search over interior points of both intervals minimising alpha.
pub fn hm_constants_search(
    drift: &DriftCertificate,
    minor: &MinorizationCertificate,
    steps: usize,
) -> Result<ContractionConstants> {
    let steps = steps.max(1);
    let g_lo = drift.gamma + 2.0 * drift.k / minor.radius;
    let mut best = hm_constants_default(drift, minor)?;
    for i in 1..=steps {
        let alpha0 = minor.alpha_bar * i as f64 / (steps + 1) as f64;
        for j in 1..=steps {
            let gamma0 = g_lo + (1.0 - g_lo) * j as f64 / (steps + 1) as f64;
            if let Ok(cc) = hm_constants_tagged(drift, minor, alpha0, gamma0, Provenance::Fitted, Provenance::Fitted) {
                if cc.alpha < best.alpha {
                    best = cc;
                }
            }
        }
    }
    Ok(best)
}

/// Outcome of an empirical contraction check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub check: String,
    pub factor: f64,
    pub trials: usize,
    pub comparisons: usize,
    /// Largest observed `lhs / rhs_without_factor`.
    pub worst_ratio: f64,
    pub worst_theta_index: usize,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Seminorm {
    Osc,
    Sup,
}

fn check_function_factor(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    factor: f64,
    trials: usize,
    seed: u64,
    norm: Seminorm,
    check: &str,
) -> Result<ContractionReport> {
    check_v(family, v)?;
    let wt = Weighting::new(v, beta);
    let n = family.n_states();
    let eval = |phi: &[f64]| match norm {
        Seminorm::Osc => wt.osc(phi),
        Seminorm::Sup => wt.sup(phi),
    };
    let per_theta = exec::try_map_indexed(family.grid_len(), |t| {
        let mut rng = sampling::rng_for(seed, t as u64);
        let kern = family.kernel(t);
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let scale = (trial % 2 == 1).then(|| wt.weights());
            let phi = sampling::observable(&mut rng, n, scale);
            let before = eval(&phi);
            let after = eval(&kern.apply_slice(&phi));
            if after > factor * before + tolerance::CONTRACTION {
                return Err(Error::ViolatedBound {
                    check: check.to_string(),
                    lhs: after,
                    rhs: factor * before,
                    witness: format!("grid point {t}, trial {trial}, seed {seed}"),
                });
            }
            if before > 0.0 {
                worst = worst.max(after / before);
            }
        }
        Ok(worst)
    })?;
    Ok(summarize(check, factor, trials, seed, &per_theta))
}

fn summarize(check: &str, factor: f64, trials: usize, seed: u64, per_theta: &[f64]) -> ContractionReport {
    let (idx, worst) = per_theta
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (t, &w)| if w > acc.1 { (t, w) } else { acc });
    ContractionReport {
        check: check.to_string(),
        factor,
        trials,
        comparisons: trials * per_theta.len(),
        worst_ratio: worst,
        worst_theta_index: idx,
        seed,
    }
}

/// `|||P*_theta phi|||_beta <= alpha |||phi|||_beta` on random `phi`.
pub fn check_function_contraction(
    family: &ParametricFamily,
    v: &Lyapunov,
    cc: &ContractionConstants,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    check_function_factor(
        family,
        v,
        cc.weight(),
        cc.alpha,
        trials,
        seed,
        Seminorm::Osc,
        "function contraction |||P* phi||| <= alpha |||phi|||",
    )
}

/// `sigma_beta(P mu1, P mu2) <= factor sigma_beta(mu1, mu2)` on random pairs.
pub fn check_measure_factor(
    family: &ParametricFamily,
    v: &Lyapunov,
    beta: WeightParam,
    factor: f64,
    trials: usize,
    seed: u64,
    check: &str,
) -> Result<ContractionReport> {
    check_v(family, v)?;
    let wt = Weighting::new(v, beta);
    let n = family.n_states();
    let per_theta = exec::try_map_indexed(family.grid_len(), |t| {
        let mut rng = sampling::rng_for(seed, 1 << 32 | t as u64);
        let kern = family.kernel(t);
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let m1 = sampling::probability(&mut rng, n);
            let m2 = sampling::probability(&mut rng, n);
            let diff: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a - b).collect();
            let before = wt.rho(&diff);
            let after = wt.rho(&kern.push_slice(&diff));
            if after > factor * before + tolerance::CONTRACTION {
                return Err(Error::ViolatedBound {
                    check: check.to_string(),
                    lhs: after,
                    rhs: factor * before,
                    witness: format!("grid point {t}, trial {trial}, seed {seed}"),
                });
            }
            if before > 0.0 {
                worst = worst.max(after / before);
            }
        }
        Ok(worst)
    })?;
    Ok(summarize(check, factor, trials, seed, &per_theta))
}

pub fn check_measure_contraction(
    family: &ParametricFamily,
    v: &Lyapunov,
    cc: &ContractionConstants,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    check_measure_factor(
        family,
        v,
        cc.weight(),
        cc.alpha,
        trials,
        seed,
        "measure contraction sigma(P mu1, P mu2) <= alpha sigma(mu1, mu2)",
    )
}

/// Growth bound `P*_theta V <= gamma_1 V + K_1` with `gamma_1 > 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub gamma_1: f64,
    pub k_1: f64,
    pub worst: SlackWitness,
    pub provenance: Provenance,
}

/// Default lower bound imposed on `gamma_1`.
pub const DEFAULT_GAMMA1_FLOOR: f64 = 1.01;

/// Fits `(gamma_1, K_1)` minimising `max(1 + beta K_1, gamma_1)` subject to
/// `gamma_1 >= floor`.
pub fn fit_growth(family: &ParametricFamily, v: &Lyapunov, beta: f64, floor: f64) -> Result<GrowthCertificate> {
    check_v(family, v)?;
    if !(floor > 1.0 && floor.is_finite()) {
        return Err(Error::param("gamma1_floor", floor, "must exceed 1"));
    }
    let data = DriftData::new(
        &family.kernels().iter().collect::<Vec<_>>(),
        &vec![v.values(); family.grid_len()],
    );
    let mut lines = vec![Line::new(0.0, 1.0), Line::new(1.0, 0.0)];
    let mut hi = floor;
    for (pv, vv) in &data.pv {
        for (&c, &vx) in pv.iter().zip(vv) {
            lines.push(Line::new(-beta * vx, 1.0 + beta * c));
            if vx > 0.0 {
                hi = hi.max(c / vx);
            }
        }
    }
    let (g1, _) = pwl::minimize_max(&lines, floor, hi + 1.0);
    let k1 = data.k_for(g1);
    verify_growth(family, v, g1, k1, Provenance::Fitted)
}

pub fn verify_growth(
    family: &ParametricFamily,
    v: &Lyapunov,
    gamma_1: f64,
    k_1: f64,
    provenance: Provenance,
) -> Result<GrowthCertificate> {
    if !(gamma_1 > 1.0) || !(k_1 >= 0.0) {
        return Err(Error::param(
            "gamma_1",
            gamma_1,
            "growth needs gamma_1 > 1 and K_1 >= 0",
        ));
    }
    let vs = vec![v.values(); family.grid_len()];
    let slack = drift_slack(family.kernels(), &vs, gamma_1, k_1);
    let worst = worst_of(&slack);
    if worst.slack < -tolerance::DRIFT {
        return Err(violation("growth P*V <= gamma_1 V + K_1", &worst, gamma_1, k_1));
    }
    Ok(GrowthCertificate {
        gamma_1,
        k_1,
        worst,
        provenance,
    })
}

/// Certificate for families that contract only after `r` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RStepCertificate {
    pub r: usize,
    pub gamma_r: f64,
    pub k_r: f64,
    pub gamma_1: f64,
    pub k_1: f64,
    /// `max(1 + beta K_1, gamma_1)`.
    pub alpha_prime: f64,
    /// Contraction rate of `P^r`.
    pub alpha_r: f64,
    /// `alpha_r^{-1} alpha'^{r-1}`.
    pub c: f64,
    /// `alpha_r^{1/r}`.
    pub alpha: f64,
    pub beta: f64,
    pub drift_r: DriftCertificate,
    pub minor_r: MinorizationCertificate,
    pub cc_r: ContractionConstants,
    pub growth: GrowthCertificate,
}

impl RStepCertificate {
    pub fn weight(&self) -> WeightParam {
        WeightParam::new(self.beta).expect("beta validated at construction")
    }

    /// Bound factor for `|||P^{*n} phi||| / |||phi|||`: `C alpha^n`.
    pub fn decay_bound(&self, n: usize) -> f64 {
        self.c * self.alpha.powi(n as i32)
    }

    /// The sharper chain bound `alpha_r^m alpha'^k` for `n = r m + k`.
    pub fn chain_bound(&self, n: usize) -> f64 {
        let (m, k) = (n / self.r, n % self.r);
        self.alpha_r.powi(m as i32) * self.alpha_prime.powi(k as i32)
    }
}

/// Options for the r-step search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStepOptions {
    pub r_max: usize,
    pub radius_margin: f64,
    pub gamma1_floor: f64,
    pub drift: DriftOptions,
}

impl Default for RStepOptions {
    fn default() -> Self {
        Self {
            r_max: 8,
            radius_margin: DEFAULT_RADIUS_MARGIN,
            gamma1_floor: DEFAULT_GAMMA1_FLOOR,
            drift: DriftOptions::default(),
        }
    }
}

/// Smallest `r <= r_max` whose r-step kernels admit drift and minorization.
/// If drift holds for some `r` but minorization never does, the last
/// minorization failure is returned.
pub fn fit_r_step(family: &ParametricFamily, v: &Lyapunov, opts: RStepOptions) -> Result<RStepCertificate> {
    check_v(family, v)?;
    if opts.r_max == 0 {
        return Err(Error::param("r_max", 0.0, "must be at least 1"));
    }
    let mut minorization_failure = None;
    for r in 1..=opts.r_max {
        let fam_r = family.powered(r);
        match fit_drift_with(&fam_r, v, opts.drift) {
            Ok(drift_r) => match assemble_r_step(family, &fam_r, v, r, drift_r, None, opts) {
                Err(e @ (Error::ZeroMinorization | Error::EmptySmallSet { .. })) => minorization_failure = Some(e),
                other => return other,
            },
            Err(Error::InfeasibleDrift { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(minorization_failure.unwrap_or(Error::NoFeasibleR { r_max: opts.r_max }))
}

fn assemble_r_step(
    family: &ParametricFamily,
    fam_r: &ParametricFamily,
    v: &Lyapunov,
    r: usize,
    drift_r: DriftCertificate,
    growth: Option<(f64, f64)>,
    opts: RStepOptions,
) -> Result<RStepCertificate> {
    let radius = drift_r.default_radius(opts.radius_margin);
    let minor_r = fit_minorization(fam_r, v, &drift_r, radius)?;
    let cc_r = hm_constants_default(&drift_r, &minor_r)?;
    let beta = cc_r.beta;
    let growth = match growth {
        Some((g1, k1)) => verify_growth(family, v, g1, k1, Provenance::Derived)?,
        None => fit_growth(family, v, beta, opts.gamma1_floor)?,
    };
    let alpha_prime = (1.0 + beta * growth.k_1).max(growth.gamma_1);
    let alpha_r = cc_r.alpha;
    let c = alpha_prime.powi(r as i32 - 1) / alpha_r;
    Ok(RStepCertificate {
        r,
        gamma_r: drift_r.gamma,
        k_r: drift_r.k,
        gamma_1: growth.gamma_1,
        k_1: growth.k_1,
        alpha_prime,
        alpha_r,
        c,
        alpha: alpha_r.powf(1.0 / r as f64),
        beta,
        drift_r,
        minor_r,
        cc_r,
        growth,
    })
}

/// Smallest `r >= 1` with `gamma^r c / a < 1`.
pub fn smallest_uniform_r(gamma: f64, c_over_a: f64) -> Option<usize> {
    if !(gamma > 0.0 && gamma < 1.0 && c_over_a > 0.0) {
        return None;
    }
    let mut g = gamma;
    for r in 1..=10_000 {
        if g * c_over_a < 1.0 {
            return Some(r);
        }
        g *= gamma;
    }
    None
}

/// Sandwich `a V + b <= V_theta <= c V + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Result of converting per-parameter drift into a uniform r-step certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualDrift {
    pub gamma: f64,
    pub k: f64,
    pub drift_provenance: Provenance,
    pub sandwich: Sandwich,
    pub certificate: RStepCertificate,
}

/// Turns per-parameter drift for `V_theta` into an r-step certificate for `V`.
///
/// `r` is the smallest with `gamma^r c / a < 1`; then
/// `gamma_r = gamma^r c / a`, `K_r = (gamma^r d + K/(1 - gamma) - b)^+ / a`, and the
/// one-step growth constants are `gamma_1 = gamma c / a` (raised to the floor if
/// needed) and `K_1 = (gamma d + K - b)^+ / a`. Both are re-verified on the grid.
pub fn individual_to_uniform(
    family: &ParametricFamily,
    v_family: &[Lyapunov],
    v: &Lyapunov,
    sandwich: Sandwich,
    drift: Option<(f64, f64)>,
    opts: RStepOptions,
) -> Result<IndividualDrift> {
    check_v(family, v)?;
    let Sandwich { a, b, c, d } = sandwich;
    if !(a > 0.0 && c > 0.0) {
        return Err(Error::param("a", a.min(c), "sandwich needs a > 0 and c > 0"));
    }
    if v_family.len() != family.grid_len() {
        return Err(Error::DimensionMismatch {
            context: "per-parameter Lyapunov functions",
            expected: family.grid_len(),
            found: v_family.len(),
        });
    }
    for (t, vt) in v_family.iter().enumerate() {
        check_v(family, vt)?;
        for (x, (&vx, &vtx)) in v.values().iter().zip(vt.values()).enumerate() {
            let lo = a * vx + b;
            let hi = c * vx + d;
            if vtx < lo - tolerance::DRIFT || vtx > hi + tolerance::DRIFT {
                return Err(Error::SandwichViolated {
                    theta_index: t,
                    state: x,
                    detail: format!("V_theta = {vtx}, bounds [{lo}, {hi}]"),
                });
            }
        }
    }
    let vs: Vec<&[f64]> = v_family.iter().map(|l| l.values()).collect();
    let (gamma, k, prov) = match drift {
        Some((g, k)) => (g, k, Provenance::User),
        None => {
            let kernels: Vec<&Kernel> = family.kernels().iter().collect();
            let (g, k, _) = fit_joint(&kernels, &vs, opts.drift)?;
            (g, k, Provenance::Fitted)
        }
    };
    if !(gamma > 0.0 && gamma < 1.0 && k >= 0.0) {
        return Err(Error::param(
            "gamma",
            gamma,
            "per-parameter drift needs gamma in (0, 1), K >= 0",
        ));
    }
    let slack = drift_slack(family.kernels(), &vs, gamma, k);
    let worst = worst_of(&slack);
    if worst.slack < -tolerance::DRIFT {
        return Err(violation(
            "per-parameter drift P*V_theta <= gamma V_theta + K",
            &worst,
            gamma,
            k,
        ));
    }

    let r = smallest_uniform_r(gamma, c / a).ok_or(Error::NoFeasibleR { r_max: 10_000 })?;
    let gr = gamma.powi(r as i32);
    let gamma_r = gr * c / a;
    let k_r = ((gr * d + k / (1.0 - gamma) - b) / a).max(0.0);
    let gamma_1 = (gamma * c / a).max(opts.gamma1_floor);
    let k_1 = ((gamma * d + k - b) / a).max(0.0);

    let fam_r = family.powered(r);
    let drift_r = verify_drift(&fam_r, v, gamma_r, k_r, Provenance::Derived)?;
    let certificate = assemble_r_step(family, &fam_r, v, r, drift_r, Some((gamma_1, k_1)), opts)?;
    Ok(IndividualDrift {
        gamma,
        k,
        drift_provenance: prov,
        sandwich,
        certificate,
    })
}

/// Empirical decay `|||P^{*n} phi||| <= C alpha^n |||phi|||`, `n = 1..=n_max`,
/// together with the chain bound `alpha_r^m alpha'^k`.
pub fn check_r_step_decay(
    family: &ParametricFamily,
    v: &Lyapunov,
    cert: &RStepCertificate,
    n_max: usize,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    check_v(family, v)?;
    let wt = Weighting::new(v, cert.weight());
    let n = family.n_states();
    let per_theta = exec::try_map_indexed(family.grid_len(), |t| {
        let mut rng = sampling::rng_for(seed, 2 << 32 | t as u64);
        let kern = family.kernel(t);
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let scale = (trial % 2 == 1).then(|| wt.weights());
            let mut phi = sampling::observable(&mut rng, n, scale);
            let base = wt.osc(&phi);
            for step in 1..=n_max {
                phi = kern.apply_slice(&phi);
                let now = wt.osc(&phi);
                let chain = cert.chain_bound(step);
                let bound = cert.decay_bound(step);
                if now > chain * base + tolerance::CONTRACTION || now > bound * base + tolerance::CONTRACTION {
                    return Err(Error::ViolatedBound {
                        check: format!("r-step decay at n = {step}"),
                        lhs: now,
                        rhs: chain.min(bound) * base,
                        witness: format!("grid point {t}, trial {trial}, seed {seed}"),
                    });
                }
                if base > 0.0 {
                    worst = worst.max(now / (bound * base));
                }
            }
        }
        Ok(worst)
    })?;
    Ok(summarize(
        "r-step decay |||P^n* phi||| <= C alpha^n |||phi|||",
        1.0,
        trials,
        seed,
        &per_theta,
    ))
}

/// One-step bounds with factor `alpha'`: `||P* phi||_beta`, `|||P* phi|||_beta`
/// and `sigma_beta(P mu1, P mu2)`.
pub fn check_one_step_growth(
    family: &ParametricFamily,
    v: &Lyapunov,
    cert: &RStepCertificate,
    trials: usize,
    seed: u64,
) -> Result<Vec<ContractionReport>> {
    let beta = cert.weight();
    Ok(vec![
        check_function_factor(
            family,
            v,
            beta,
            cert.alpha_prime,
            trials,
            seed,
            Seminorm::Sup,
            "growth ||P* phi|| <= alpha' ||phi||",
        )?,
        check_function_factor(
            family,
            v,
            beta,
            cert.alpha_prime,
            trials,
            seed,
            Seminorm::Osc,
            "growth |||P* phi||| <= alpha' |||phi|||",
        )?,
        check_measure_factor(
            family,
            v,
            beta,
            cert.alpha_prime,
            trials,
            seed,
            "growth sigma(P mu1, P mu2) <= alpha' sigma(mu1, mu2)",
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::Observable;

    fn two_state() -> ParametricFamily {
        let k = Kernel::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        ParametricFamily::single(k, Observable::new(vec![1.0, 2.0]).unwrap()).unwrap()
    }

    fn v01() -> Lyapunov {
        Lyapunov::new(vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn two_state_drift() {
        let d = fit_drift(&two_state(), &v01()).unwrap();
        assert!((d.gamma - 0.7).abs() < 1e-12, "{}", d.gamma);
        assert!((d.k - 0.1).abs() < 1e-12);
        assert!(d.worst.slack.abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_is_infeasible() {
        let fam = ParametricFamily::single(Kernel::identity(3), Observable::constant(3, 0.0)).unwrap();
        let v = Lyapunov::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(fit_drift(&fam, &v), Err(Error::InfeasibleDrift { .. })));
    }

    #[test]
    fn two_state_minorization() {
        let fam = two_state();
        let d = fit_drift(&fam, &v01()).unwrap();
        let m = fit_minorization(&fam, &v01(), &d, 1.0).unwrap();
        assert_eq!(m.small_set, vec![0, 1]);
        assert!((m.alpha_bar - 0.3).abs() < 1e-12);
        assert!((m.mu_bar[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mu_bar[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(fit_minorization(&fam, &v01(), &d, 0.5).is_err());
    }

    #[test]
    fn identical_rows_give_full_minorization() {
        let row = vec![0.2, 0.3, 0.5];
        let k = Kernel::from_rows(vec![row.clone(); 3]).unwrap();
        let fam = ParametricFamily::single(k, Observable::constant(3, 0.0)).unwrap();
        let v = Lyapunov::new(vec![0.0, 1.0, 4.0]).unwrap();
        let d = fit_drift(&fam, &v).unwrap();
        let m = fit_minorization(&fam, &v, &d, 10.0).unwrap();
        assert!((m.alpha_bar - 1.0).abs() < 1e-12);
        for (a, b) in m.mu_bar.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_rows_fail_minorization() {
        let fam =
            ParametricFamily::single(Kernel::permutation(&[1, 0]).unwrap(), Observable::constant(2, 0.0)).unwrap();
        let v = Lyapunov::new(vec![1.0, 1.0]).unwrap();
        let d = verify_drift(&fam, &v, 0.5, 0.5, Provenance::User).unwrap();
        assert!(matches!(
            fit_minorization(&fam, &v, &d, 3.0),
            Err(Error::ZeroMinorization)
        ));
        assert!(matches!(
            fit_minorization(&fam, &Lyapunov::new(vec![5.0, 5.0]).unwrap(), &d, 3.0),
            Err(Error::EmptySmallSet { .. })
        ));
    }

    fn synthetic(gamma: f64, k: f64, r: f64, abar: f64) -> (DriftCertificate, MinorizationCertificate) {
        let d = DriftCertificate {
            gamma,
            k,
            slack: vec![],
            worst: SlackWitness {
                theta_index: 0,
                state: 0,
                slack: 0.0,
            },
            tail_ratio: 0.0,
            provenance: Provenance::User,
            grid_hash: String::new(),
        };
        let m = MinorizationCertificate {
            radius: r,
            small_set: vec![0],
            alpha_bar: abar,
            mu_bar: vec![1.0],
            worst: d.worst,
            provenance: Provenance::User,
            grid_hash: String::new(),
        };
        (d, m)
    }

    #[test]
    fn hm_arithmetic() {
        let (d, m) = synthetic(0.5, 1.0, 5.0, 0.5);
        let cc = hm_constants(&d, &m, 0.2, 0.95).unwrap();
        assert!((cc.beta - 0.2).abs() < 1e-15);
        assert!((cc.alpha_minorization_branch - 0.7).abs() < 1e-15);
        assert!((cc.alpha - 2.95 / 3.0).abs() < 1e-15);
        assert!(hm_constants(&d, &m, 0.5, 0.95).is_err());
        assert!(hm_constants(&d, &m, 0.2, 0.85).is_err());
    }

    #[test]
    fn hm_zero_k_is_floored() {
        let (d, m) = synthetic(0.5, 0.0, 1.0, 0.5);
        let cc = hm_constants_default(&d, &m).unwrap();
        assert!(cc.k_floored);
        assert_eq!(cc.k_used, tolerance::K_FLOOR);
    }

    #[test]
    fn hm_monotone_in_alpha0() {
        let (d, m) = synthetic(0.5, 1.0, 5.0, 0.5);
        let a: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.49]
            .iter()
            .map(|&a0| hm_constants(&d, &m, a0, 0.95).unwrap().alpha_minorization_branch)
            .collect();
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(*a.last().unwrap() < 1.0);
        let s = hm_constants_search(&d, &m, 20).unwrap();
        assert!(s.alpha <= hm_constants_default(&d, &m).unwrap().alpha);
    }

    #[test]
    fn uniform_r_arithmetic() {
        assert_eq!(smallest_uniform_r(0.8, 4.0), Some(7));
        assert_eq!(smallest_uniform_r(0.8, 1.0), Some(1));
        assert_eq!(smallest_uniform_r(1.0, 1.0), None);
    }

    #[test]
    fn contraction_two_state() {
        let fam = two_state();
        let d = fit_drift(&fam, &v01()).unwrap();
        let m = fit_minorization(&fam, &v01(), &d, 1.0).unwrap();
        let cc = hm_constants_default(&d, &m).unwrap();
        let rep = check_function_contraction(&fam, &v01(), &cc, 1000, 3).unwrap();
        assert!(rep.worst_ratio <= cc.alpha);
        let rep = check_measure_contraction(&fam, &v01(), &cc, 1000, 3).unwrap();
        assert!(rep.worst_ratio <= cc.alpha);
    }

    #[test]
    fn r_step_degenerates_for_one_step_family() {
        let c = fit_r_step(&two_state(), &v01(), RStepOptions::default()).unwrap();
        assert_eq!(c.r, 1);
        assert!((c.gamma_r - 0.7).abs() < 1e-12);
        assert!(c.gamma_1 > 1.0 && c.c >= 1.0);
    }

    #[test]
    fn growth_fit_is_feasible_and_minimal() {
        let fam = two_state();
        let g = fit_growth(&fam, &v01(), 0.5, 1.01).unwrap();
        assert!(g.gamma_1 >= 1.01);
        let ap = (1.0 + 0.5 * g.k_1).max(g.gamma_1);
        // Any feasible (g1, K1) on a coarse scan cannot do better.
        for i in 0..200 {
            let g1 = 1.01 + i as f64 * 0.01;
            let k1 = (0.1f64).max(0.8 - g1).max(0.0);
            assert!(ap <= (1.0 + 0.5 * k1).max(g1) + 1e-12);
        }
    }
}

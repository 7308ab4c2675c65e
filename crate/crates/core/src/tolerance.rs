//! Numerical slack used throughout the crate.
//!
//! The inequalities being certified are exact statements; these constants are
//! the declared floating-point allowance for each family of checks. They are
//! echoed verbatim into every report.

use serde::{Deserialize, Serialize};

/// Row sums of a kernel must equal one to within this.
pub const ROW_SUM: f64 = 1e-10;
/// Probability measures must have unit mass to within this.
pub const MASS: f64 = 1e-12;
/// Stochasticity of kernel products.
pub const POWER_ROW_SUM: f64 = 1e-9;
/// Slack on the drift inequality P*V <= gamma V + K.
pub const DRIFT: f64 = 1e-10;
/// Slack on the minorization inequality P(x, j) >= alpha_bar mu_bar(j).
pub const MINORIZATION: f64 = 1e-12;
/// Slack on contraction checks of the oscillation seminorm.
pub const CONTRACTION: f64 = 1e-9;
/// Slack on Lipschitz hypothesis checks.
pub const LIPSCHITZ: f64 = 1e-10;
/// Residual and centering postconditions of Poisson solutions.
pub const POISSON_RESIDUAL: f64 = 1e-8;
/// Agreement required between series and direct Poisson solutions.
pub const POISSON_ORACLE: f64 = 1e-6;
/// Agreement required between iterated and linear-solve invariant measures.
pub const INVARIANT_ORACLE: f64 = 1e-8;
/// Fitted drift rates are capped at 1 - this.
pub const GAMMA_MARGIN: f64 = 1e-6;
/// Substitute for K when the fitted drift constant is exactly zero.
pub const K_FLOOR: f64 = 1e-12;

/// The tolerance set as a serializable record, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub row_sum: f64,
    pub mass: f64,
    pub drift: f64,
    pub minorization: f64,
    pub contraction: f64,
    pub lipschitz: f64,
    pub poisson_residual: f64,
    pub poisson_oracle: f64,
    pub invariant_oracle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            row_sum: ROW_SUM,
            mass: MASS,
            drift: DRIFT,
            minorization: MINORIZATION,
            contraction: CONTRACTION,
            lipschitz: LIPSCHITZ,
            poisson_residual: POISSON_RESIDUAL,
            poisson_oracle: POISSON_ORACLE,
            invariant_oracle: INVARIANT_ORACLE,
        }
    }
}

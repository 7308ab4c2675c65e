use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the certification pipeline can report.
///
/// Variants carry enough location data (state index, grid index, witness
/// values) to reproduce the failing check from the report alone.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid model at {location}: {message}")]
    InvalidModel { location: String, message: String },

    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: String,
    },

    #[error("drift condition infeasible: tail ratio P*V/V = {ratio} >= 1 at state {state} (grid point {theta_index})")]
    InfeasibleDrift {
        ratio: f64,
        theta_index: usize,
        state: usize,
    },

    #[error("small set {{V <= {radius}}} is empty")]
    EmptySmallSet { radius: f64 },

    #[error("rows over the small set have disjoint supports; no uniform minorization")]
    ZeroMinorization,

    #[error("no r <= {r_max} yields a drift condition for the r-step kernels")]
    NoFeasibleR { r_max: usize },

    #[error("sandwich a*V + b <= V_theta <= c*V + d violated at state {state} (grid point {theta_index}): {detail}")]
    SandwichViolated {
        theta_index: usize,
        state: usize,
        detail: String,
    },

    #[error("{check} violated: {lhs} > {rhs} ({witness})")]
    ViolatedBound {
        check: String,
        lhs: f64,
        rhs: f64,
        witness: String,
    },

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("singular linear system in {what}")]
    SingularSystem { what: &'static str },

    #[error("{what}: oracle disagreement {gap} exceeds {tol}")]
    OracleMismatch { what: &'static str, gap: f64, tol: f64 },

    #[error(
        "discretization too coarse at grid point {theta_index}: drift constants deviate by {deviation} from the continuous prediction (tolerance {tol})"
    )]
    GridTooCoarse {
        theta_index: usize,
        deviation: f64,
        tol: f64,
    },

    #[error("degenerate parameter grid: {0}")]
    DegenerateGrid(String),

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("postcondition failed in {what}: {detail}")]
    Postcondition { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Config(_) | Error::InvalidParameter { .. } => 2,
            Error::InfeasibleDrift { .. }
            | Error::EmptySmallSet { .. }
            | Error::ZeroMinorization
            | Error::NoFeasibleR { .. }
            | Error::SandwichViolated { .. }
            | Error::DegenerateGrid(_) => 3,
            Error::ViolatedBound { .. } | Error::Postcondition { .. } => 4,
            Error::NonConvergence { .. }
            | Error::SingularSystem { .. }
            | Error::OracleMismatch { .. }
            | Error::LinearProgram(_) => 5,
            Error::Io { .. } => 6,
            Error::InvalidModel { .. } | Error::DimensionMismatch { .. } | Error::GridTooCoarse { .. } => 7,
        }
    }

    /// Short machine-readable tag used in JSON failure reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidModel { .. } => "InvalidModel",
            Error::InvalidParameter { .. } => "InvalidParameter",
            Error::InfeasibleDrift { .. } => "InfeasibleDrift",
            Error::EmptySmallSet { .. } => "EmptySmallSet",
            Error::ZeroMinorization => "ZeroMinorization",
            Error::NoFeasibleR { .. } => "NoFeasibleR",
            Error::SandwichViolated { .. } => "SandwichViolated",
            Error::ViolatedBound { .. } => "ViolatedBound",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::SingularSystem { .. } => "SingularSystem",
            Error::OracleMismatch { .. } => "OracleMismatch",
            Error::DegenerateGrid(_) => "DegenerateGrid",
            Error::GridTooCoarse { .. } => "GridTooCoarse",
            Error::LinearProgram(_) => "LinearProgram",
            Error::Postcondition { .. } => "Postcondition",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
            Error::Config(_) => "Config",
        }
    }

    pub(crate) fn param(name: &'static str, value: f64, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            value,
            reason: reason.into(),
        }
    }

    pub(crate) fn model(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidModel {
            location: location.into(),
            message: message.into(),
        }
    }
}

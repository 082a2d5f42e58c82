use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants fall into three families that the CLI maps onto distinct exit
/// codes: configuration problems, data problems and numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data at row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("rank deficient design: column `{column}` is collinear with earlier columns")]
    RankDeficient { column: String },

    #[error("separation detected while fitting the response model")]
    Separation,

    #[error("non-identifiable: {0}")]
    NonIdentifiable(String),

    #[error("constraints infeasible: {0}")]
    Infeasible(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("bootstrap unstable: only {used} of {requested} resamples converged")]
    BootstrapUnstable { used: usize, requested: usize },
}

impl Error {
    /// Coarse category used for exit codes and error records.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::InvalidRow { .. }
            | Error::InvalidData(_)
            | Error::DimensionMismatch { .. }
            | Error::RankDeficient { .. } => ErrorCategory::Data,
            Error::Separation
            | Error::NonIdentifiable(_)
            | Error::Infeasible(_)
            | Error::NoConvergence { .. }
            | Error::BootstrapUnstable { .. } => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn no_convergence(what: &str, iterations: usize, residual: f64) -> Self {
        Error::NoConvergence {
            what: what.to_string(),
            iterations,
            residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;

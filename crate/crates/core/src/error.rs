use thiserror::Error;

use crate::mse::FeasibilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// The power-allocation system has no positive solution for the current filters.
    #[error("targets infeasible for current filters: {0}")]
    InfeasibleForFilters(String),

    /// The requested per-stream targets cannot be met. Carries the feasibility
    /// report computed from the last filters tried.
    #[error("infeasible targets: {reason}")]
    Infeasible {
        reason: String,
        report: Option<Box<FeasibilityReport>>,
    },

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Option<Box<crate::inner::MacState>>,
    },

    #[error("duality conversion failed: {0}")]
    Duality(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

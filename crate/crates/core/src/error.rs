use thiserror::Error;

/// Errors shared by all numerical modules.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape mismatches, non-finite entries, out-of-range parameters.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Problems that are structurally unsolvable (singular covariance,
    /// rank-deficient design with lambda = 0, ...).
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// Near-zero denominators in the debiasing step.
    #[error("numerical instability: {0}")]
    Instability(String),

    /// CSV / config ingestion failures; carries a human-readable location.
    #[error("parse error: {0}")]
    Parse(String),

    /// Bad CLI configuration (unknown keys, missing columns, ...).
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
    pub fn instability(msg: impl Into<String>) -> Self {
        Error::Instability(msg.into())
    }
}

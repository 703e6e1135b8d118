use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// The weighted resultant is too short to define a mean direction.
    #[error("degenerate resultant: ||r|| = {norm:e}")]
    DegenerateResultant { norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite values or diverging optimisation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stale tape: recorded at step {tape_step}, network is at step {net_step}")]
    StaleTape { tape_step: u64, net_step: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// True for failures the CLI reports with the numeric exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::DegenerateResultant { .. })
    }
}

use thiserror::Error;

/// Errors produced by the simulation and estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed inputs: duplicate tie-break pairs, unknown centers in a
    /// ranked list, metrics requested for applicants they are not defined for.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A belief or distribution lookup failed (unknown cell, center, score).
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// A run configuration failed validation. The message carries the field path.
    #[error("config error: {0}")]
    Config(String),

    /// Exhaustive enumeration would exceed the hard pair budget.
    #[error("enumeration too large: {pairs} pairs exceeds the {limit} guard")]
    EnumerationGuard { pairs: u128, limit: u128 },

    /// A parameter matrix is not usable (not PSD, wrong dimension).
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

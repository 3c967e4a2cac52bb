use thiserror::Error;

use crate::data::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset failed validation with {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),

    #[error("unknown covariate column `{0}`")]
    UnknownColumn(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("all observation weights are zero")]
    ZeroWeights,

    #[error("subject `{subject}`: {message}")]
    Subject { subject: String, message: String },

    #[error("positivity failure: {0}")]
    Positivity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state space of {states} histories exceeds enumeration budget {budget}")]
    StateSpaceOverflow { states: u128, budget: u128 },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Invalid(_) => "invalid-data",
            Error::UnknownColumn(_) => "unknown-column",
            Error::Dimension(_) => "dimension",
            Error::ZeroWeights => "zero-weights",
            Error::Subject { .. } => "subject",
            Error::Positivity(_) => "positivity",
            Error::Config(_) => "config",
            Error::StateSpaceOverflow { .. } => "state-space-overflow",
            Error::Mismatch(_) => "mismatch",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

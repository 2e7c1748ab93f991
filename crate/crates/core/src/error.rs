use thiserror::Error;

use crate::ndiff::NdiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    /// A configuration value is missing or out of range; `field` is a dotted path.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Training produced a non-finite value in the named loss term.
    #[error("non-finite {term} at epoch {epoch}, step {step}: {value}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("{what} did not converge after {iterations} iterations (best residual {residual})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

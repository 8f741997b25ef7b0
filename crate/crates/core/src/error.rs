//! Error type shared across the crate.
//!
//! The three variants mirror the three failure classes a caller can act on:
//! bad configuration (fix the inputs), bad data (fix the file), and numerical
//! breakdown (increase jitter, inspect conditioning). The CLI maps them to
//! distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid parameter values, impossible requests.
    #[error("configuration error: {0}")]
    Config(String),

    /// Unusable dataset contents: missing columns, constant features, no rows.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure, typically a Cholesky factorization that did not
    /// go through. The message carries condition diagnostics.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

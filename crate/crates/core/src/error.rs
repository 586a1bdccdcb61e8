//! Error types shared across the solver library.

use thiserror::Error;

/// Errors raised by configuration validation, solver iteration, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or dimension mismatch detected before compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: invalid class index, empty batch, stale tape, and similar.
    #[error("usage error: {0}")]
    Usage(String),

    /// A required optional capability (e.g. a Hessian block) is not provided.
    #[error("capability error: {0}")]
    Capability(String),

    /// Iteration produced non-finite values or particles escaped the guard radius.
    #[error("divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    /// Malformed data file; carries the 1-based line number where parsing failed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A probed callable returned NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

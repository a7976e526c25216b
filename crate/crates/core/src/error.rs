//! Shared error type for the numerical library.

use thiserror::Error;

/// Errors produced by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (wrong sign, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Vector/matrix shapes do not line up.
    #[error("dimension mismatch: expected {expected}, got {got} in {context}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// An ODE trajectory left the admissible region (chaotic blow-up).
    #[error("trajectory diverged; last finite time t = {t_last}")]
    Divergence { t_last: f64 },

    /// A matrix factorization failed even after jitter escalation.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Not enough data to fit a model.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Inconsistent configuration of pipeline stages.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

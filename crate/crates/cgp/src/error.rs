//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum CgpError {
    /// Invalid configuration or arguments (CLI exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Certificate operations are undefined before the first observation.
    #[error("empty sample store: certificate undefined before the first observation")]
    EmptyStore,

    /// An empty member pool was handed to an operation that needs one;
    /// the caller should re-estimate the active set first.
    #[error("empty member pool: re-estimate the active set before requesting a gap report")]
    EmptyPool,

    /// The active set appears empty or otherwise degenerate. In known-L mode
    /// this terminates the run; adaptive mode converts it into a doubling
    /// event (CLI exit code 3 when a run ends this way).
    #[error("anomaly: {0}")]
    Anomaly(String),

    /// A numeric routine failed (e.g. Cholesky factorization at max jitter).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for CgpError {
    fn from(e: serde_json::Error) -> Self {
        CgpError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CgpError>;

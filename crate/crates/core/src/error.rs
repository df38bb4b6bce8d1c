use std::path::PathBuf;

use thiserror::Error;

use crate::train::DivergenceReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input data is unusable (non-finite values, empty corpus, bad ids).
    #[error("data error: {0}")]
    Data(String),

    /// A tensor that must be finite holds NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    /// Training produced a non-finite loss or gradient norm.
    #[error("training diverged at step {}: loss={} lr={} grad_norm={}", .0.step, .0.loss, .0.lr, .0.grad_norm)]
    Divergence(Box<DivergenceReport>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or operation received incompatible dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Invalid argument outside its documented domain.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Network or training configuration rejected at build time.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed binary input (IDX, dataset, checkpoint).
    #[error("{format} parse error at byte {offset}: {reason}")]
    Parse {
        format: &'static str,
        offset: u64,
        reason: String,
    },

    /// Training aborted (non-finite loss, empty data, ...).
    #[error("training failed: {0}")]
    Train(String),

    /// Backward called twice, missing gradient, non-scalar loss.
    #[error("tape error: {0}")]
    Tape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

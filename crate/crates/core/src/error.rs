use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument is outside the operation's domain.
    #[error("invalid argument for {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    /// A tape was asked to run a second backward pass.
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    /// NaN or Inf encountered where finite values are required.
    #[error("non-finite value in {context} (step {step})")]
    NonFinite { context: String, step: u64 },

    /// Malformed input data (labels, manifests, images).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container violations (magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type. Every fallible public function returns [`Result`].

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent for the attempted operation. The message
    /// names the offending dimension.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Rejected configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or incompatible checkpoint contents.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed dataset directory, manifest, or image file.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Evaluation preconditions violated (degenerate normalizer, too few
    /// samples, and so on).
    #[error("eval error: {0}")]
    Eval(String),

    /// Training aborted because the loss or an intermediate value diverged.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

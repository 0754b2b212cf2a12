use std::path::PathBuf;

use camseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Input data violates a value contract (non-binary mask, NaN, ...).
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{what} {value} out of range ({allowed})")]
    Range { what: &'static str, value: usize, allowed: String },

    #[error("class {class_id} pool holds {available} instances, episode needs {needed}")]
    Capacity { class_id: usize, available: usize, needed: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use capgan_tensor::TensorError;
use thiserror::Error;

use crate::persist::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("probe too weak: {attribute} accuracy {accuracy:.4} is below the required {required}")]
    ProbeQuality { attribute: &'static str, accuracy: f64, required: f64 },

    #[error("non-finite {term} loss at scale {scale}")]
    NonFinite { scale: usize, term: &'static str },

    #[error("{count} record(s) failed: ids {ids:?}: {first}")]
    Records { count: usize, ids: Vec<usize>, first: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

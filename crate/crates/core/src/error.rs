use std::path::PathBuf;

use blockpool_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 input: {0}")]
    Encoding(String),
    #[error("byte stream is not valid UTF-8 at offset {offset}")]
    Decoding { offset: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("segmentation error: {0}")]
    Segmentation(String),
    #[error("sequence of {len} blocks exceeds the position limit of {limit}")]
    Length { len: usize, limit: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token {token:?}")]
    UnknownToken { token: String },
    #[error("stream of {len} tokens is too short for batch_size={batch_size}, seq_len={seq_len}")]
    StreamTooShort {
        len: usize,
        batch_size: usize,
        seq_len: usize,
    },
    #[error("id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
}

#[derive(Debug, Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic(String),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint tensor {0} missing")]
    MissingTensor(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("numeric abort at step {step}: {reason}")]
    NumericAbort {
        step: usize,
        reason: String,
        report: Box<crate::train::TrainReport>,
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

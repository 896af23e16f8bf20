use std::path::PathBuf;

use chn_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ChnError>;

#[derive(Debug, Error)]
pub enum ChnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("embedding file {path} line {line}: expected {expected} values, found {found}")]
    EmbeddingDim {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("token id {id} outside vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("non-finite loss on sample `{sample}`")]
    NonFiniteLoss { sample: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("generated sample `{0}` has no gold counterpart")]
    MissingSample(String),
}

impl ChnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChnError::Io {
            path: path.into(),
            source,
        }
    }
}

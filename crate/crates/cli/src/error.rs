use std::path::PathBuf;

use chn::ChnError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("config file {path} does not match the schema: {message}")]
    ConfigSchema { path: PathBuf, message: String },

    #[error("gradient check failed for block(s): {0}")]
    GradcheckFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error(transparent)]
    Chn(#[from] ChnError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingFile(_) => 3,
            CliError::ConfigSchema { .. } => 4,
            CliError::Chn(ChnError::Config(_) | ChnError::ConfigMismatch { .. }) => 4,
            CliError::GradcheckFailed(_) => 5,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Fails with [`CliError::MissingFile`] unless `path` exists.
pub fn require(path: impl Into<PathBuf>) -> Result<PathBuf> {
    let path = path.into();
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingFile(path))
    }
}

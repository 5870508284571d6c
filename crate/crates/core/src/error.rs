use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum FerError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FerError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FerError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FerError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        FerError::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FerError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Reasons a checkpoint file is refused.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("truncated checkpoint")]
    Truncated,

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = FerError> = std::result::Result<T, E>;

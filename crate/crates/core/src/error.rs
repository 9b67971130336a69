// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),
    #[error("shape contract violated: {0}")]
    Contract(String),
    #[error("corrupt dataset entry {id}: {reason}")]
    CorruptDataset { id: String, reason: String },
    #[error("training fault at step {step}: {reason}")]
    TrainingFault { step: usize, reason: String },
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("wav error for {path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("io error for {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn wav(path: impl Into<PathBuf>, source: hound::Error) -> Self {
        Error::Wav {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by operator input (bad files, bad arguments).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Degenerate(_)
                | Error::InsufficientSignal(_)
                | Error::CorruptDataset { .. }
                | Error::Wav { .. }
                | Error::Io { .. }
        )
    }

    /// True for errors caused by configuration documents or checkpoints.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::Schema { .. } | Error::Version(_) | Error::Json(_)
        )
    }
}

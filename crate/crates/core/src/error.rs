use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HcaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input-domain error: {0}")]
    InputDomain(String),

    #[error("numeric-input error: {0}")]
    NumericInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint version mismatch: stored {stored:?}, expected {expected:?}")]
    VersionMismatch { stored: String, expected: String },

    #[error("non-finite loss in term {term} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("{0}")]
    Runtime(String),
}

impl HcaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HcaError::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }
}

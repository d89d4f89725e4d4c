use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingestion { path: path.into(), reason: reason.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

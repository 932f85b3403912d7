use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: image error: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("schema {name} is invalid: {reason}")]
    InvalidSchema { name: String, reason: String },
    #[error("schema mismatch: expected {expected} keypoints, found {found} ({context})")]
    SchemaMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("record {id}: {reason}")]
    InvalidRecord { id: u64, reason: String },
    #[error("degenerate bounding box {0:?}")]
    DegenerateBbox([f64; 4]),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DataError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        DataError::Json {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

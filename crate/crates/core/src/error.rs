//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload size mismatch in {path}: header declares {expected} bytes, file has {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid cube: {0}")]
    InvalidCube(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible split targets: class {class} in {split} split needs {needed} pixels, only {available} available")]
    InfeasibleSplit {
        class: u16,
        split: String,
        needed: usize,
        available: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing capture_time on cubes: {}", .0.join(", "))]
    MissingCaptureTime(Vec<String>),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid edge matrix: {0}")]
    InvalidEdge(String),

    #[error("class index {index} out of range for {k} classes")]
    ClassOutOfRange { index: usize, k: usize },

    #[error("annotation {annotation} references unknown image {image_id}")]
    UnknownImage { annotation: usize, image_id: u64 },

    #[error("annotation {annotation} references unknown category {category_id}")]
    UnknownCategory { annotation: usize, category_id: u64 },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("class mapping lists source id {0} more than once")]
    DuplicateMapping(u64),

    #[error("class mapping target {0} is not part of the target taxonomy")]
    UnknownTarget(u64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("detector failed on image {image_id}: {reason}")]
    Detector { image_id: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::Divergence { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

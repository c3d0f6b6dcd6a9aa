use std::path::PathBuf;

use thiserror::Error;

use crate::stroke::FieldViolation;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid stroke: {}", format_violations(.0))]
    InvalidStroke(Vec<FieldViolation>),

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("block ({row}, {col}) out of range for level {level}")]
    BlockOutOfRange { level: usize, row: usize, col: usize },

    #[error("block ({row}, {col}) of level {level} is full")]
    BlockFull { level: usize, row: usize, col: usize },

    #[error("length mismatch: expected {expected}, found {found} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("unknown class id {id} (model has {num_classes} classes)")]
    UnknownClass { id: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(v: &[FieldViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty label set")]
    EmptyLabelSet,

    #[error("invalid label: {0}")]
    InvalidLabel(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("batch too small: {got} rows, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("embedding row {row} is not unit norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("loss not differentiable here: {0}")]
    NotDifferentiable(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dataset too small: {0} samples, need at least 2")]
    DatasetTooSmall(usize),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("degenerate run: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

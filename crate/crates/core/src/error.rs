use std::path::PathBuf;

/// Errors raised by the engine, models, attacks and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} at pixel {pixel} is out of range for {classes} classes")]
    LabelOutOfRange {
        label: usize,
        pixel: usize,
        classes: usize,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration index {t} outside 1..={total}")]
    IterationOutOfRange { t: usize, total: usize },
    #[error("empty confusion matrix: no pixels were accumulated")]
    EmptyConfusion,
    #[error("training diverged at iteration {0}: loss is not finite")]
    Diverged(usize),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

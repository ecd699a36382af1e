use std::path::PathBuf;

/// Errors raised anywhere in the detection pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("failed to encode image: {0}")]
    Encode(#[source] image::ImageError),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown residual generator `{0}`")]
    UnknownGenerator(String),

    #[error("samples have zero variance")]
    ZeroVariance,

    #[error("cell ({row}, {col}): {source}")]
    Cell {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("residual `{kind}`: {source}")]
    Residual {
        kind: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("training diverged (non-finite loss at epoch {epoch})")]
    Diverged { epoch: usize },

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("run directory is locked by another process ({0} exists; remove it if stale)")]
    Locked(PathBuf),

    #[error("{failed} of {total} images failed")]
    Incomplete { failed: usize, total: usize },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

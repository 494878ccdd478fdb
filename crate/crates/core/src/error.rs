use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point depth {depth} is in front of the near plane {near}")]
    DegenerateDepth { depth: f64, near: f64 },

    #[error("projected covariance is not invertible (det = {det:e})")]
    NonInvertibleCovariance { det: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("correlation undefined: {0} map has zero variance on the valid mask")]
    DegenerateVariance(&'static str),

    #[error("not enough valid pixels ({0})")]
    EmptyMask(usize),

    #[error("class set must not contain the air class 0")]
    InvalidClassSet,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("tokenizer has not been trained")]
    UntrainedTokenizer,

    #[error("history of {len} frames exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid config at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateDepth { .. } => "DegenerateDepth",
            Error::NonInvertibleCovariance { .. } => "NonInvertibleCovariance",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::EmptyMask(_) => "EmptyMask",
            Error::InvalidClassSet => "InvalidClassSet",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::EmptyDataset => "EmptyDataset",
            Error::UntrainedTokenizer => "UntrainedTokenizer",
            Error::ContextOverflow { .. } => "ContextOverflow",
            Error::Config { .. } => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "JsonError",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid flow file: {0}")]
    InvalidFlow(String),

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint record `{record}` has shape {found:?}, expected {expected:?}")]
    RecordShape {
        record: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidFlow(_) => "invalid_flow",
            Error::UnsupportedImage(_) => "unsupported_image",
            Error::Checksum { .. } => "checksum",
            Error::InvalidCheckpoint(_) => "invalid_checkpoint",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::RecordShape { .. } => "record_shape",
            Error::Incompatible(_) => "incompatible_checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}

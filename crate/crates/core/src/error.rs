use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: malformed file at byte {offset}: {reason}")]
    Format { path: String, offset: u64, reason: String },

    #[error("insufficient measurements for any stage: have {available}, stage 1 needs {required}")]
    InsufficientMeasurements { available: usize, required: usize },

    #[error("missing checkpoint for stage {stage} (needed to train stage {needed_by})")]
    MissingCheckpoint { stage: usize, needed_by: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 configuration, 3 data / IO, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Shape(_)
            | Error::Data(_)
            | Error::Format { .. }
            | Error::InsufficientMeasurements { .. }
            | Error::MissingCheckpoint { .. }
            | Error::Io { .. }
            | Error::Image { .. } => 3,
        }
    }
}

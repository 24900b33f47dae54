use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration: bad dimensions, preset mismatch, unknown keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// A manifest record could not be turned into a sample.
    #[error("record {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// Caller combined arguments that the selected mode does not accept.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite loss or activation; training stops here.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Load { .. }
                | Error::Shape(_)
                | Error::Index(_)
                | Error::Usage(_)
                | Error::Checkpoint(_)
        )
    }
}

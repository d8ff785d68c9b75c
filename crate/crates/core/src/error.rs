use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or configuration value.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or map shape does not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset layout problem, e.g. an image without a matching mask.
    #[error("load error for sample `{id}`: {reason}")]
    Load { id: String, reason: String },

    /// Training produced non-finite or degenerate values.
    #[error(
        "divergence at epoch {epoch}, step {step}: non-finite or degenerate values in `{tensor}`"
    )]
    Divergence {
        tensor: String,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Shape(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

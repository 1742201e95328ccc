use std::path::PathBuf;

use thiserror::Error;

use crate::cascade::Model;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("threshold state is frozen")]
    Frozen,

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Non-finite loss or gradient during training. Carries the model as of the
    /// last step that completed with finite values, when one exists.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: usize,
        detail: String,
        last_good: Option<Box<Model>>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

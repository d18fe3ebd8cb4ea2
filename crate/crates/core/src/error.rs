use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FanError>;

#[derive(Debug, Error)]
pub enum FanError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FanError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FanError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FanError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FanError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, bad files, bad
    /// arguments) as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            FanError::InvalidArgument(_)
                | FanError::Config(_)
                | FanError::UnknownKey(_)
                | FanError::Parse { .. }
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the colorization pipeline.
#[derive(Debug, Error)]
pub enum TcvcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("malformed {format} data: {field}: {detail}")]
    Format {
        format: &'static str,
        field: &'static str,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("insufficient frames: need more than {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing flow: {0}")]
    MissingFlow(String),
}

pub type Result<T> = std::result::Result<T, TcvcError>;

impl TcvcError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        TcvcError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcvcError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AapError {
    /// An input violates a mathematical precondition of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of two operands do not agree.
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A cache or checkpoint does not belong to the data it is used with.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Normalization of an all-zero vector was requested.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error in {path}, line {line}, field {field}: {msg}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AapError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(
        path: impl std::fmt::Display,
        line: usize,
        field: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        AapError::Parse {
            path: path.to_string(),
            line,
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AapError>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by the exit code the CLI maps them to:
/// configuration problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("record {record}: invalid field `{field}`: {reason}")]
    Record {
        record: String,
        field: String,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("corrupt snapshot for task {task}: {reason}")]
    CorruptSnapshot { task: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn record(record: &str, field: &str, reason: impl Into<String>) -> Self {
        Error::Record {
            record: record.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::State(_) => 1,
            Error::Numeric(_) => 3,
            Error::Record { .. }
            | Error::Data(_)
            | Error::Dimension { .. }
            | Error::CorruptSnapshot { .. }
            | Error::Io { .. }
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid token id {id} (scope holds {len} tokens)")]
    InvalidId { id: u32, len: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("degenerate feature: {matrix} row {row} has zero norm")]
    DegenerateFeature { matrix: &'static str, row: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Runtime,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn in_task(self, task: usize) -> Self {
        match self {
            e @ Error::Task { .. } => e,
            e => Error::Task {
                task,
                source: Box::new(e),
            },
        }
    }

    /// Short machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidId { .. } => "invalid-id",
            Error::State(_) => "state",
            Error::Consistency(_) => "consistency",
            Error::DegenerateFeature { .. } => "degenerate-feature",
            Error::Numeric(_) => "numeric",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::Parse { .. } => "parse",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Task { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Usage,
            Error::Io { .. }
            | Error::MissingArtifact(_)
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Parse { .. } => ErrorClass::Io,
            Error::Task { source, .. } => source.class(),
            _ => ErrorClass::Runtime,
        }
    }
}

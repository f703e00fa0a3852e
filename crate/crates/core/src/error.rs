use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("ingestion failed for record {record}: {reason}")]
    Ingestion { record: String, reason: String },

    #[error("cannot split cell (language={language}, label={label}): {count} examples, need at least 3")]
    Split {
        language: String,
        label: String,
        count: usize,
    },

    #[error("insufficient pool for {what}: required {required}, available {available}")]
    Sampling {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("self-training error: {0}")]
    SelfTraining(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse error family, used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Transport(_) => ErrorKind::Backend,
            Error::Ingestion { .. }
            | Error::Split { .. }
            | Error::Sampling { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Checkpoint(_)
            | Error::SelfTraining(_) => ErrorKind::Data,
            Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Backend => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Backend => "backend",
        }
    }
}

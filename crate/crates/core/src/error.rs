use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Sampling(String),

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint: file truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: checksum mismatch")]
    ChecksumMismatch,

    #[error("checkpoint: malformed contents ({0})")]
    MalformedCheckpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line tool: 2 for data problems,
    /// 3 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            Error::Csv { .. }
            | Error::Data(_)
            | Error::Sampling(_)
            | Error::BadMagic
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::ChecksumMismatch
            | Error::MalformedCheckpoint(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::Shape { .. } | Error::InvalidArgument(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

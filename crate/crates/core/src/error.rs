use std::path::PathBuf;

use crate::trace::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sequence of {len} tokens exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("unknown preset `{0}`")]
    Lookup(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("payload length mismatch: header declares {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("trace failed validation ({} violation(s)); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 argument, 3 I/O, 4 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_)
            | Error::Capacity { .. }
            | Error::Lookup(_)
            | Error::Placement(_)
            | Error::Capability(_) => 2,
            Error::Io { .. } | Error::Stream(_) => 3,
            Error::Format(_)
            | Error::Length { .. }
            | Error::Validation(_)
            | Error::Coverage(_)
            | Error::Mismatch(_) => 4,
        }
    }
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

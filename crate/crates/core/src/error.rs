use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrnetError>;

#[derive(Debug, Error)]
pub enum DrnetError {
    /// Operand shapes do not fit the operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A well-formed request that violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file could not be decoded. `offset` is the byte (or line, for CSV) position.
    #[error("{}: parse error at offset {offset}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// A file decoded fine but its contents are inconsistent.
    #[error("{}: integrity error: {msg}", path.display())]
    Integrity { path: PathBuf, msg: String },

    /// Non-finite values appeared during an iterative computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DrnetError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DrnetError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DrnetError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrnetError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 usage, 3 parse/integrity, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            DrnetError::Shape { .. } | DrnetError::InvalidInput(_) | DrnetError::Io { .. } => 2,
            DrnetError::Parse { .. } | DrnetError::Integrity { .. } => 3,
            DrnetError::Numeric(_) => 4,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps onto one of the process exit codes used by the CLI
/// through [`FincError::exit_code`].
#[derive(Debug, Error)]
pub enum FincError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("row {row}: expected {expected} columns, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("size guard: problem size {size} exceeds limit {limit}")]
    SizeGuard { size: usize, limit: usize },
}

impl FincError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FincError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 input error, 3 numerical failure, 4 size guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            FincError::Numerical(_) => 3,
            FincError::SizeGuard { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, FincError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FincError {
    FincError::InvalidParameter(msg.into())
}

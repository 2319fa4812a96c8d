use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (bad file row, invalid box,
    /// schema mismatch, out-of-range parameter). Maps to exit code 2.
    #[error("validation: {0}")]
    Validation(String),

    /// An internal invariant was violated. Maps to exit code 3.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    /// Process exit code for the CLI: 2 for input validation failures,
    /// 3 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Io(_) => 2,
            Error::Internal(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

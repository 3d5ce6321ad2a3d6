//! Crate-wide error type with stable process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Command-line misuse (exit 2).
    #[error("usage: {0}")]
    Usage(String),

    /// Bad configuration or an operation contract violation (exit 3).
    #[error("config: {0}")]
    Config(String),

    /// Shape mismatch between tensor operands (exit 3).
    #[error("{op}: incompatible shapes {lhs:?} x {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index outside a valid range (exit 3).
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: i64,
        bound: usize,
    },

    /// Violated operation precondition (exit 3).
    #[error("contract: {0}")]
    Contract(String),

    /// Word outside the closed vocabulary (exit 4).
    #[error("vocabulary: {0}")]
    Vocab(String),

    /// Corrupt or inconsistent on-disk data (exit 4).
    #[error("data integrity: {0}")]
    DataIntegrity(String),

    /// A verification suite reported failures (exit 5).
    #[error("check failure: {0}")]
    CheckFailure(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 usage, 3 config, 4 data integrity,
    /// 5 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Dim { .. } | Error::Index { .. } | Error::Contract(_) => 3,
            Error::Vocab(_) | Error::DataIntegrity(_) | Error::Io(_) => 4,
            Error::CheckFailure(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

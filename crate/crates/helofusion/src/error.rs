//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied data failed. Names the offending field.
    #[error("validation error: {0}")]
    Validation(String),

    /// An index or split point fell outside its permitted range.
    #[error("range error: {0}")]
    Range(String),

    /// Tensor shapes do not conform for a primitive.
    #[error("shape error in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or Inf appeared in checked mode.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file could not be parsed. Carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A file declared an unsupported schema version.
    #[error("version error: found schema {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// Checkpoint and config disagree.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for input problems, 3 for numerical faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

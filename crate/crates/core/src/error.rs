//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between two operands; the message names both.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is structurally invalid (e.g. odd head width).
    #[error("invalid config: {0}")]
    Config(String),

    /// Bad runtime input: out-of-range token, strided label buffer, etc.
    #[error("invalid input: {0}")]
    Input(String),

    /// An internal precondition documented on the call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A checkpoint failed validation; names the offending array.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

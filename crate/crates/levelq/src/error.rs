//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LqError {
    /// A caller passed an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A network or run configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in a state that does not admit it
    /// (e.g. re-freezing an already frozen cluster).
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric error in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    /// A serialized stream failed validation; `offset` is the byte position.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LqError>;

impl LqError {
    pub fn argument(msg: impl Into<String>) -> Self {
        LqError::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LqError::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        LqError::State(msg.into())
    }

    pub fn format(offset: usize, detail: impl Into<String>) -> Self {
        LqError::Format { offset, detail: detail.into() }
    }
}

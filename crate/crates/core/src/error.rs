use std::io;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A record violates the event or file schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Events were not sorted by timestamp.
    #[error("ordering error: event {index} has ts {ts} earlier than previous ts {prev}")]
    Ordering { index: usize, ts: i64, prev: i64 },

    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Configuration cannot produce a valid result.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or vector dimensions disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A binary container has the wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),

    /// A quantity is mathematically undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

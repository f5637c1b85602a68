use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("context length {got} exceeds maximum {max}")]
    ContextTooLong { got: usize, max: usize },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("span [{start}, {start}+{len}) with next-token targets does not fit context of length {ctx}")]
    SpanOutOfRange { start: usize, len: usize, ctx: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("generation retries exhausted: {0}")]
    RetriesExhausted(String),

    #[error("budget mismatch: {0}")]
    BudgetMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

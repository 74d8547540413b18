use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),
    /// A forward or backward pass produced NaN or an infinity.
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(String),
    /// A caller violated a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Malformed or out-of-range user input (item ids, empty sequences, files).
    #[error("input error: {0}")]
    Input(String),
    /// A model invariant (for example `W_d >= 0`) does not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: parameter out of range, mismatched lengths.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough scoreable tokens to run a statistical test.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Degenerate numeric input, e.g. all logits -inf or an all-zero distribution.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Sequence and model disagree: zero-probability token at a scored position.
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    /// Failure reported by a logit source (external provider, model backend).
    #[error("logit source error: {0}")]
    Source(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for construction, numeric-domain, and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A sequence/index argument referenced a position outside `0..L`.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A numeric argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Construction-time invariant violated (sizes, normalization, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A score value was non-positive where the true ratio is positive.
    #[error("invalid score {score} at a neighbor with positive true ratio")]
    InvalidScore { score: f64 },

    /// The conditioning event (observed tokens) has probability zero.
    #[error("conditioning event has probability zero at position {position}")]
    ZeroConditioningEvent { position: usize },

    /// A marginal ratio was requested against a zero-probability state.
    #[error("marginal probability of the reference state is zero")]
    ZeroDenominator,

    /// An exact enumeration would exceed the configured cap.
    #[error("enumeration cap exceeded: {what} needs {needed}, cap is {cap}")]
    CapExceeded {
        what: &'static str,
        needed: u128,
        cap: u128,
    },

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A serialized artifact (oracle file, checkpoint) had an unexpected
    /// layout or version.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration rejected by schema validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

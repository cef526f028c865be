use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a domain precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A parameter invariant failed; names the offending field.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// An iterative solver did not converge.
    #[error("solver failed: {0}")]
    Solver(String),

    /// A simulated state left the finite range.
    #[error("state diverged (non-finite) at t = {time} s")]
    Diverged { time: f64 },

    /// Configuration or data file problems.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<V> = std::result::Result<V, Error>;

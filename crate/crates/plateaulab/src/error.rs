//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Task-level contract violation (e.g. factor annotations required).
    #[error("task error: {0}")]
    Task(String),

    /// A loss or metric became NaN/inf; training aborts rather than
    /// continuing with poisoned state.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Frozen encoder failed its injectivity check.
    #[error("encoder injectivity violated: {0}")]
    Injectivity(String),

    /// On-disk artifact malformed or from an incompatible schema version.
    #[error("archive format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI contract: anything wrong with user
    /// input (configs, flags, malformed archives) exits 2, runtime
    /// failures such as divergence exit 3. Exit 4 is reserved for partial
    /// sweep failure and is produced by the sweep command, not an error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Task(_) | Error::Format(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

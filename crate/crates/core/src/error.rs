use thiserror::Error;

/// Errors surfaced by the compression engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes are inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or a numerically impossible request.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A training loop diverged.
    #[error("training failed at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// A latency lookup missed.
    #[error("latency table has no entry for signature `{0}`")]
    LatencyLookup(String),

    /// A file artifact is missing or malformed.
    #[error("artifact `{path}`: {msg}")]
    Artifact { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn artifact(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

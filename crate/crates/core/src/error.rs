use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("token `{token}` is not in the prompt vocabulary")]
    OutOfVocabulary { token: String },

    /// Training produced a non-finite loss. `last_good_step` is the last step
    /// whose parameters were finite.
    #[error("non-finite loss at step {step} (last good step {last_good_step})")]
    NonFiniteLoss { step: usize, last_good_step: usize },

    #[error("training did not converge: final loss {final_loss} above threshold {threshold}")]
    NotConverged { final_loss: f64, threshold: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("clip container format: {0}")]
    Container(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input or configuration rather
    /// than a numerical breakdown.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) | Error::NotConverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn bad_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

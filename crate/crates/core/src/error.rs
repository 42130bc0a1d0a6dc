//! Crate-wide error type.

/// Errors surfaced by the gateway library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller-supplied data violated a precondition (bad dimension, invalid
    /// class index, empty dataset, malformed weights, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted document failed its magic/version/shape checks.
    #[error("format error: {0}")]
    Format(String),

    /// Weight calibration could not produce a usable separation.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Backdoor embedding finished but missed its post-conditions.
    #[error(
        "embedding failed: trigger accuracy {trigger_accuracy:.4}, clean accuracy drop {clean_accuracy_drop:.4}"
    )]
    Embedding {
        trigger_accuracy: f64,
        clean_accuracy_drop: f64,
    },

    /// Trigger generation ran out of attempts before reaching the requested count.
    #[error("trigger generation exhausted attempts: produced {achieved} of {requested}")]
    TriggerGeneration { requested: usize, achieved: usize },

    /// Wire-protocol problem (malformed message, unexpected response).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A remote or local oracle failed to answer a query.
    #[error("oracle error: {0}")]
    Oracle(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

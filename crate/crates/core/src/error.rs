use thiserror::Error;

/// Errors raised across the toolkit.
///
/// `Validation` covers malformed inputs and configuration; `Numerical` is
/// reserved for training divergence (non-finite losses) so that callers can
/// map it onto a distinct exit status.
#[derive(Debug, Error)]
pub enum DacError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("unknown variable id {0}")]
    UnknownVariable(u32),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DacError {
    pub fn validation(msg: impl Into<String>) -> Self {
        DacError::Validation(msg.into())
    }

    /// Prefix a validation message with the config section it concerns.
    pub fn within(self, section: &str) -> Self {
        match self {
            DacError::Validation(m) => DacError::Validation(format!("{section}: {m}")),
            other => other,
        }
    }

    /// Process exit status: 3 for a numerical abort, 1 for I/O and
    /// serialization failures, 2 for every kind of invalid input.
    pub fn exit_code(&self) -> i32 {
        match self {
            DacError::Numerical(_) => 3,
            DacError::Io(_) | DacError::Json(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DacError>;

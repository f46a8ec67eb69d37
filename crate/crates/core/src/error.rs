use thiserror::Error;

/// Errors raised by the audit engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),

    #[error("session decided at stage {tau}; no further observations accepted")]
    SessionDecided { tau: u32 },

    #[error("session has no observations to undo")]
    EmptyHistory,

    #[error("evaluation seed {0} equals the calibration seed; use a fresh seed")]
    SeedReuse(u64),

    #[error("{path}: {message}")]
    Data { path: String, message: String },

    #[error("unsupported artifact version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("config hash mismatch: artifact records {recorded}, config hashes to {computed}")]
    HashMismatch { recorded: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A configuration problem tied to a single key.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    Missing(&'static str),

    #[error("unknown key `{0}`")]
    Unknown(String),

    #[error("key `{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },

    #[error("{message}")]
    Constraint { key: &'static str, message: String },

    #[error("cannot parse config: {0}")]
    Syntax(String),
}

impl ConfigError {
    /// The offending key, when the error is attributable to one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Missing(k) => Some(k),
            ConfigError::Unknown(k) => Some(k),
            ConfigError::Type { key, .. } => Some(key),
            ConfigError::Constraint { key, .. } => Some(key),
            ConfigError::Syntax(_) => None,
        }
    }

    pub(crate) fn constraint(key: &'static str, message: impl Into<String>) -> Self {
        ConfigError::Constraint {
            key,
            message: message.into(),
        }
    }
}

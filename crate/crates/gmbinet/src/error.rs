use std::path::PathBuf;

/// Errors of the std layer; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gmbinet_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error("images without masks: {}", .0.join(", "))]
    MissingMasks(Vec<String>),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// 0 success, 2 usage or configuration, 3 artifact incompatibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownKey(_) | Error::InvalidValue { .. } | Error::Usage(_) | Error::MissingMasks(_) => 2,
            Error::Core(gmbinet_core::Error::FingerprintMismatch { .. }) | Error::Core(gmbinet_core::Error::Checkpoint(_)) => 3,
            Error::Core(
                gmbinet_core::Error::Indivisible { .. }
                | gmbinet_core::Error::InputSize { .. }
                | gmbinet_core::Error::InvalidArgument { .. },
            ) => 2,
            _ => 1,
        }
    }
}

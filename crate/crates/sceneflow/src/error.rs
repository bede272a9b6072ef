use std::path::PathBuf;

/// Errors produced by the library. Every error carries enough context for the
/// CLI to print a one-line `ERROR <code>: <message>` diagnostic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("registration failure: {0}")]
    RegistrationFailure(String),

    #[error("non-finite loss in component {component}")]
    NonFiniteLoss { component: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable code for CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::Format { .. } => "FORMAT",
            Error::RegistrationFailure(_) => "REGISTRATION",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::Io { .. } => "IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

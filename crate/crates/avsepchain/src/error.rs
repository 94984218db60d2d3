use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config/usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Incompatible(_) => 2,
            Error::Format(_)
            | Error::Io(_)
            | Error::DegenerateInput(_)
            | Error::DegenerateTarget(_)
            | Error::InvalidState(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

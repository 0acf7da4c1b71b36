use std::io;

use thiserror::Error;

/// Every failure the engine can report, grouped by class.
///
/// The class drives the CLI exit code, so new variants should map onto one
/// of the existing classes rather than invent another.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid-input",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
            Error::Internal(_) => "internal",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for this class; 0, 1 and 8 are left to the binary.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) => 4,
            Error::Data(_) => 5,
            Error::Numeric(_) => 6,
            Error::Internal(_) => 7,
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;

use std::io;

/// Errors raised anywhere in the toolkit.
///
/// Each variant maps onto one of the CLI exit codes through
/// [`Error::exit_code`]; the `Display` form starts with a stable prefix
/// (`config:`, `input:`, ...) so scripts can match on it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("corruption: {0}")]
    Corruption(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("invariant: {0}")]
    Invariant(String),
    #[error("numeric: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// 1 usage/config, 2 data, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Input(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::UndefinedCorrelation(_)
            | Error::Corruption(_) => 2,
            Error::Contract(_) | Error::Invariant(_) | Error::NonFinite(_) => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

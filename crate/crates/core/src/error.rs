use std::path::PathBuf;

use thiserror::Error;

use crate::data::ClientId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, dataset, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A config field failed parsing or validation. `field` is a dotted path.
    #[error("invalid config at `{field}`: {message}")]
    Validation { field: String, message: String },

    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    /// A violated internal invariant.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("training split is empty; client must be skipped")]
    EmptyShard,

    #[error("client {client} produced non-finite parameters")]
    NonFinite { client: ClientId },

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },

    #[error("run `{run}`: {source}")]
    Run { run: String, source: Box<Error> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input (config, arguments, files) rather
    /// than by a failure during execution.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Validation { .. } | Error::Usage(_) | Error::Format(_) => true,
            Error::Round { source, .. } | Error::Run { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

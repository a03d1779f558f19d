use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record or row failed schema validation. `line` is 1-based when the
    /// input came from a file.
    #[error("{}{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default(), query_id.as_ref().map(|q| format!("[{q}] ")).unwrap_or_default())]
    Record {
        line: Option<usize>,
        query_id: Option<String>,
        message: String,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("model file version error: {0}")]
    Version(String),

    #[error("model file checksum error: {0}")]
    Checksum(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(message: impl Into<String>) -> Self {
        Error::Record {
            line: None,
            query_id: None,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// Attach a 1-based line number to a record error.
    pub fn at_line(self, line: usize) -> Self {
        match self {
            Error::Record {
                query_id, message, ..
            } => Error::Record {
                line: Some(line),
                query_id,
                message,
            },
            other => other,
        }
    }

    /// True for errors caused by the input data rather than the environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Record { .. }
                | Error::Range(_)
                | Error::InvalidInput(_)
                | Error::Dimension(_)
                | Error::Image { .. }
                | Error::Version(_)
                | Error::Checksum(_)
        )
    }
}

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TpgrError>;

#[derive(Debug, Error)]
pub enum TpgrError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("item {0} is not available")]
    Unavailable(usize),

    #[error("unknown item {0}")]
    UnknownItem(usize),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("empty user pool")]
    EmptyPool,

    #[error("bad file format: {0}")]
    Format(String),
}

impl TpgrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TpgrError::InvalidArgument(msg.into())
    }

    /// Coarse classification used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            TpgrError::InvalidArgument(_) => ErrorKind::Config,
            TpgrError::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

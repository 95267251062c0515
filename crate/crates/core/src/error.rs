use thiserror::Error;

/// Errors produced anywhere in the pruning toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;

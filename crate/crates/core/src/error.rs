use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error("image format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
pub(crate) use param_err;
pub(crate) use shape_err;

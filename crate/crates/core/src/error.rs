use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("config error on line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}: {msg}")]
    Divergence { iteration: u64, msg: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used as the CLI failure prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Param(_) => "param",
            Error::Usage(_) => "usage",
            Error::DegenerateStats(_) => "degenerate",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;

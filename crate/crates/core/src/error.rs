//! Crate-wide error type. Variants are grouped by failure class so callers
//! (and the CLI exit-code mapping) can tell usage problems from bad data and
//! bad data from bugs.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions violate an operation's contract.
    #[error("dimension error in {op}: {msg}")]
    Dim { op: &'static str, msg: String },

    /// A computation produced NaN or infinity.
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// An API contract other than shape was violated (bad argument, wrong
    /// tape, reuse after move, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid configuration value or unparsable config file.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure, with the path that caused it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed image file (bad magic, truncated data, unsupported layout).
    #[error("codec error in {path}: {msg}")]
    Codec { path: PathBuf, msg: String },

    /// Malformed or incompatible checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dim { op, msg: msg.into() }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric { op, msg: msg.into() }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn codec(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Codec { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration (bad ranges, missing domains, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid user-supplied input data.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed on-disk artifact (bad magic, truncation, manifest mismatch).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// CLI exit code class: 1 for contract/config-style errors, 2 for I/O and
    /// file-format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

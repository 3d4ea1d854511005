use std::fmt;

use bnpbss::{Error, WavError};

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: bad flags, bad config, inconsistent inputs.
    Usage(String),
    /// Exit 3: files that cannot be read or written.
    Io(String),
    /// Exit 4: the numerics broke down.
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    /// Wraps a library error, prefixing `context` (usually a path).
    pub fn from_lib(context: &str, err: Error) -> Self {
        let msg = if context.is_empty() {
            err.to_string()
        } else {
            format!("{context}: {err}")
        };
        match &err {
            Error::Wav(WavError::Empty) => CliError::Usage(msg),
            Error::Wav(_) => CliError::Io(msg),
            e if e.is_numeric() => CliError::Numeric(msg),
            _ => CliError::Usage(msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::from_lib("", err)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Maps an I/O error on `path` to exit code 3.
pub fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

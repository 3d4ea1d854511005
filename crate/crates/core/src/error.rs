use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or writing RIFF/WAVE files.
#[derive(Debug, Error)]
pub enum WavError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed WAV header: {0}")]
    Malformed(String),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("signal has no samples")]
    Empty,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures of the generalized inverse Gaussian numerics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GigError {
    #[error("Bessel argument must be positive, got {0}")]
    Domain(f64),
    #[error("invalid GIG parameters (gamma={gamma}, rho={rho}, tau={tau})")]
    InvalidParams { gamma: f64, rho: f64, tau: f64 },
    #[error("moment diverges for gamma={gamma} in the tau -> 0 limit")]
    DivergentMoment { gamma: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {what} at ({row}, {col})")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("singular demixing system ({0})")]
    Singular(String),
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Gig(#[from] GigError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// True when the failure comes from the numerics rather than from the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Singular(_) | Error::Gig(_) => true,
            Error::AtIteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity was produced.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A data file does not follow its documented format.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint could not be restored.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("feature extraction failed on tweet {index}: {reason}")]
    Feature { index: usize, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::Dimension(format!(
            "{op}: incompatible shapes {}x{} and {}x{}",
            a.0, a.1, b.0, b.1
        ))
    }
}

//! One error type for the whole binary.

use std::fmt;
use std::path::Path;

use anomamba_core::metrics::MetricError;

#[derive(Debug)]
pub enum Error {
    /// File access failure with the path that caused it.
    Io(String, std::io::Error),
    /// Malformed or unsupported image data.
    Image(String),
    Config(String),
    Dataset(String),
    Archive(String),
    Train(String),
    Core(anomamba_core::Error),
    Metric(MetricError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(path.display().to_string(), e)
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(path, e) => write!(f, "{path}: {e}"),
            Error::Image(m) => write!(f, "image: {m}"),
            Error::Config(m) => write!(f, "config: {m}"),
            Error::Dataset(m) => write!(f, "dataset: {m}"),
            Error::Archive(m) => write!(f, "archive: {m}"),
            Error::Train(m) => write!(f, "train: {m}"),
            Error::Core(e) => write!(f, "{e}"),
            Error::Metric(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<anomamba_core::Error> for Error {
    fn from(e: anomamba_core::Error) -> Self {
        Error::Core(e)
    }
}

impl From<MetricError> for Error {
    fn from(e: MetricError) -> Self {
        Error::Metric(e)
    }
}

use std::path::PathBuf;

use crate::optimizer::RunTrace;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("EDNZ protocol error: {0}")]
    Protocol(String),

    #[error("external denoiser timed out after {0:.1} s")]
    Timeout(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        trace: Box<RunTrace>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

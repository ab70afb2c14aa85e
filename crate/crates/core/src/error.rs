use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("empty evaluation: no valid pixels")]
    EmptyEvaluation,

    #[error("unmatched files: {0}")]
    Unmatched(String),

    #[error("unknown sample: {0}")]
    UnknownSample(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {}: {source}", path.display())]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Codec {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Codec { source, .. } => matches!(source, image::ImageError::IoError(_)),
            _ => false,
        }
    }
}

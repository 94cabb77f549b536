use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error(transparent)]
    Io(#[from] IoError),

    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    /// The SCR background ring has zero spread.
    #[error("degenerate background: ring standard deviation is zero")]
    DegenerateBackground,

    /// SCR of the reference image is zero, so the gain ratio is undefined.
    #[error("undefined gain: input SCR is zero")]
    UndefinedGain,

    #[error("degenerate feature map: {0}")]
    DegenerateFeature(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}

/// Errors raised while reading or writing images, corpora and reports.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: unsupported format ({detail})")]
    Unsupported { path: PathBuf, detail: String },

    #[error("{path}: expected a single-channel image, found {channels} channels")]
    MultiChannel { path: PathBuf, channels: usize },

    #[error("{path}: file is truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: malformed data ({detail})")]
    Malformed { path: PathBuf, detail: String },

    #[error("missing corpus files: {}", .0.join(", "))]
    Missing(Vec<String>),

    #[error("{path}: {source}")]
    Os {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IoError {
    pub(crate) fn os(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Os {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        IoError::Malformed {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

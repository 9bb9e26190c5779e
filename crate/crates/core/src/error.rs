//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("metadata error on {path}: {detail}")]
    Meta { path: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("filter design error: {0}")]
    FilterDesign(String),

    #[error("signal too short: length {len} but the filter needs more than {min} samples")]
    SignalTooShort { len: usize, min: usize },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("zero-variance channel {index}: normalization undefined")]
    ZeroVariance { index: usize },

    #[error("constant axis {index}: min-max normalization undefined")]
    ConstantAxis { index: usize },

    #[error("singular matrix in {context}")]
    Singular { context: String },

    #[error("non-positive resolution diagonal at source {index}")]
    BadResolution { index: usize },

    #[error("unknown ROI '{0}'")]
    UnknownRoi(String),

    #[error("ROI '{0}' has no sources")]
    EmptyRoi(String),

    #[error("unknown channel '{0}'")]
    UnknownChannel(String),

    #[error("layer {index} ({kind}): {detail}")]
    Layer {
        index: usize,
        kind: String,
        detail: String,
    },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{failed} of {total} grid cells failed; see manifest for details")]
    CellsFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Checkpoint,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite gradient in parameter `{path}`")]
    NonFiniteGradient { path: String },

    #[error("non-finite loss at {stage} iteration {iteration}")]
    NonFiniteLoss { stage: String, iteration: usize },

    #[error("parameter `{path}` left the 32-bit float range at {stage} iteration {iteration}")]
    ParameterOverflow { path: String, stage: String, iteration: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } => ErrorCategory::Data,
            Error::Checkpoint(_) => ErrorCategory::Checkpoint,
            Error::Shape { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::ParameterOverflow { .. } => {
                ErrorCategory::Numeric
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("parameter `{path}` has shape {found:?} in checkpoint but the model expects {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter `{path}` is missing from the checkpoint")]
    MissingParameter { path: String },

    #[error("checkpoint contains parameter `{path}` unknown to the model")]
    UnexpectedParameter { path: String },

    #[error("payload integrity check failed: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload integrity check failed: digest {found} does not match manifest digest {expected}")]
    Digest { expected: String, found: String },

    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),

    #[error("checkpoint i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

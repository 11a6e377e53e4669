use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a precondition (empty cloud, bad parameter, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two inputs that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A gradient tensor contained NaN or infinity; the step was rejected.
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(&'static str),

    /// An activation record was produced by a different forward call.
    #[error("stale activation record: {0}")]
    StaleRecord(String),

    /// A run-level failure, tagged with where it happened.
    #[error("{context}: {source}")]
    InContext {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match the expected on-disk format.
    #[error("codec error in {path}: {detail}")]
    Codec { path: PathBuf, detail: String },
}

impl Error {
    /// Wraps an error with a location tag (scene id, iteration index, ...).
    pub fn in_context(self, context: impl Into<String>) -> Self {
        Error::InContext {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Codec {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

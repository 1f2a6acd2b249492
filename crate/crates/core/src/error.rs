use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dropout mask error: {0}")]
    Mask(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown name: {0}")]
    Name(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path:?} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("artifact version {found} is not supported (this build reads version {supported})")]
    Migration { found: u32, supported: u32 },

    #[error("corrupt artifact {path:?}: {message}")]
    Corruption { path: PathBuf, message: String },

    #[error("config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap with a short description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics or of training rather than of inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::Numeric(_) | Error::Divergence { .. })
    }
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}

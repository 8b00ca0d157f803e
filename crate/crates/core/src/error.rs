use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on dimensions.
    #[error("shape error in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },

    /// An API was called in a state where it cannot run.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a precondition (labels, empty masks, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed checkpoint or volume file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training error: {0}")]
    Training(String),

    /// Failure inside one stage of the inference cascade.
    #[error("pipeline error [{stage}]: {msg}")]
    Pipeline { stage: &'static str, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub(crate) fn pipeline(stage: &'static str, msg: impl Into<String>) -> Self {
        Error::Pipeline { stage, msg: msg.into() }
    }

    /// Attaches a file path to an error raised while reading or writing it.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Unwraps [`Error::File`] layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}

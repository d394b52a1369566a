use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: every entry is masked out")]
    DegenerateBatch,

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("degenerate evaluation: every label was skipped")]
    DegenerateEvaluation,

    #[error("training diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

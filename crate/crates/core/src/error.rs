use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface, grouped by what the caller can do about it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A file or response did not match the expected schema. `raw` keeps the offending text.
    #[error("format error: {message}")]
    Format { message: String, raw: Option<String> },

    #[error("vision service error: {0}")]
    Service(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("contract error: {what}: expected {expected}, found {found}")]
    Contract {
        what: String,
        expected: String,
        found: String,
    },

    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("consistency error at segment {index}: {message}")]
    Consistency { index: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wraps a lower-level error with the pipeline stage (and segment, if any) it came from.
    #[error("{stage}{}: {source}", segment.map(|k| format!(" (segment {k})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        segment: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn format(message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            raw: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str, segment: Option<usize>) -> Self {
        Error::Stage {
            stage,
            segment,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage wrappers peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

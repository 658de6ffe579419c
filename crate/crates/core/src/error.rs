use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("trial construction error: {0}")]
    Trial(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("stale or mismatched forward cache: {0}")]
    Cache(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("label {label} out of range for {classes} active classes")]
    Label { label: usize, classes: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("lookup error: unknown utterance `{0}`")]
    Lookup(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate crop: {dimension} rounds to zero pixels")]
    DegenerateCrop { dimension: &'static str },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at step {step} (batch ids: {ids:?})")]
    NonFiniteLoss { step: u64, ids: Vec<String> },

    #[error("unknown config key `{key}`{}", suggestion_suffix(.suggestion))]
    UnknownConfigKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("invalid config value for `{key}`: {message}")]
    ConfigValue { key: String, message: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("query `{query}` has a truth id absent from the gallery: {id}")]
    MissingTruth { query: String, id: String },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn suggestion_suffix(suggestion: &Option<String>) -> String {
    match suggestion {
        Some(s) => format!(" (did you mean `{s}`?)"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::UnknownConfigKey { .. }
                | Error::ConfigValue { .. }
                | Error::Template(_)
                | Error::Shape { .. }
                | Error::MissingTruth { .. }
                | Error::EmptyGallery
        )
    }
}

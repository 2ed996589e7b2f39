use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("cannot encode {ch:?} at offset {offset}: only printable ASCII is supported")]
    Encoding { ch: char, offset: usize },

    #[error("sequence of {needed} tokens exceeds the context window of {max}")]
    Length { needed: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{file}:{line}: field `{field}`: {message}")]
    Schema {
        file: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("task `{task}`: {message}")]
    Validation { task: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss {loss} at step {step} (task `{task}`)")]
    NonFiniteLoss { step: usize, task: String, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("recipe: {0}")]
    Recipe(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}

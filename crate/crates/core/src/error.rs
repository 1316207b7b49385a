use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension { context: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("non-finite value {value} in {context} at index {index}")]
    NonFiniteValue { context: &'static str, index: usize, value: f64 },

    #[error("invalid character {character:?} at position {position} in caption {caption:?}")]
    IllegalCharacter { caption: String, position: usize, character: char },

    #[error("caption {caption:?} is {length} characters long; at most {max} allowed")]
    CaptionTooLong { caption: String, length: usize, max: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("dataset generation failed at sample {index} of split {split}: {source}")]
    Generation {
        split: String,
        index: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("{0}")]
    Mismatch(String),

    #[error("png: {0}")]
    Png(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dimension(
        context: impl Into<String>,
        expected: impl Into<Vec<usize>>,
        actual: impl Into<Vec<usize>>,
    ) -> Self {
        Error::Dimension { context: context.into(), expected: expected.into(), actual: actual.into() }
    }
}

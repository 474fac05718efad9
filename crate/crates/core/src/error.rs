use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds the model's maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown adaptation target `{0}`")]
    UnknownTarget(String),

    #[error("{0}")]
    Shape(String),

    #[error("task `{task}` has {have} validation prompts, {need} requested")]
    PoolTooSmall {
        task: String,
        need: usize,
        have: usize,
    },

    #[error("task sets differ: {0}")]
    TaskSetMismatch(String),

    #[error("warm-up did not reach exact match {threshold} within {epochs} epochs in any of {attempts} attempts; curve: {curve}")]
    WarmupFailed {
        threshold: f64,
        epochs: usize,
        attempts: usize,
        curve: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Wraps an error with the run it occurred in.
    pub fn in_run(self, context: impl Into<String>) -> Self {
        Error::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("title of item #{index} is empty after normalization")]
    EmptyTitle { index: usize },

    #[error("token {token:?} is not in the vocabulary")]
    UnknownToken { token: String },

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("no training data")]
    NoTrainingData,

    #[error("history is empty")]
    EmptyHistory,

    #[error("dataset is too sparse: {0}")]
    DatasetTooSparse(String),

    #[error("non-finite loss at batch {batch}, position {position}")]
    NonFiniteLoss { batch: usize, position: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
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
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("unknown MI code {0:?}")]
    UnknownCode(String),

    #[error("invalid rating {0}: must be 1..5")]
    InvalidRating(i64),

    #[error("utterance index {index} out of range for conversation {conversation_id} ({len} utterances)")]
    InvalidIndex {
        conversation_id: String,
        index: usize,
        len: usize,
    },

    #[error("utterance time precedes listener's first utterance by {0} seconds")]
    NegativeTenure(i64),

    #[error("single-class training set")]
    SingleClass,

    #[error("context size mismatch: model k={model}, input k={input}")]
    ContextMismatch { model: usize, input: usize },

    #[error("no model for {code} at k={k}")]
    MissingModel { code: String, k: usize },

    #[error("max 3 codes")]
    TooManyCodes,

    #[error("at least one code is required")]
    NoCodes,

    #[error("unknown utterance {0:?}")]
    UnknownUtterance(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("perfect separation: fit did not converge, offending covariate {0}")]
    Separation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("external model error: {message}")]
    External { message: String, retriable: bool },

    #[error("external model protocol error: {0}")]
    Protocol(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("store is locked by another process: {0}")]
    Locked(PathBuf),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Record { .. } => "record",
            Error::UnknownCode(_) => "unknown_code",
            Error::InvalidRating(_) => "invalid_rating",
            Error::InvalidIndex { .. } => "invalid_index",
            Error::NegativeTenure(_) => "negative_tenure",
            Error::SingleClass => "single_class",
            Error::ContextMismatch { .. } => "context_mismatch",
            Error::MissingModel { .. } => "missing_model",
            Error::TooManyCodes => "too_many_codes",
            Error::NoCodes => "no_codes",
            Error::UnknownUtterance(_) => "unknown_utterance",
            Error::Insufficient(_) => "insufficient_data",
            Error::Separation(_) => "separation",
            Error::Numerical(_) => "numerical",
            Error::External { .. } => "external",
            Error::Protocol(_) => "protocol",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Locked(_) => "locked",
            Error::ModelFile(_) => "model_file",
            Error::Invalid(_) => "invalid",
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::External { retriable: true, .. })
    }
}

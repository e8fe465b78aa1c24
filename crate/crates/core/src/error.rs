use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: zero valid lines ({malformed} malformed)")]
    NoValidLines { path: PathBuf, malformed: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate document id {0:?}")]
    IdCollision(String),

    #[error("tolerance {tolerance} unreachable without emptying a corpus")]
    BalanceUnreachable { tolerance: f64 },

    #[error("document {id} skipped: {reason}")]
    Skipped { id: String, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Box<crate::model::ModelCheckpoint>,
    },

    #[error("no adapters")]
    NoAdapters,

    #[error("tokenizer mismatch: expected {expected}, found {found}")]
    TokenizerMismatch { expected: String, found: String },

    #[error("{0}")]
    Empty(String),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::Config(_)
        )
    }
}

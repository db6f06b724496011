use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("novel `{novel}` has no character list (expected {expected})")]
    MissingRoster { novel: String, expected: PathBuf },

    #[error("missing name list: {0}")]
    MissingNameList(PathBuf),

    #[error("invalid roster for novel `{novel}`: {message}")]
    InvalidRoster { novel: String, message: String },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "cannot build {folds} folds of {per_fold} test novels: needs {needed} novels, corpus has {available}"
    )]
    TooFewNovels {
        folds: usize,
        per_fold: usize,
        needed: usize,
        available: usize,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("template error: {0}")]
    Template(String),

    #[error("source budget of {budget} tokens cannot hold the quotation and prompt ({required} tokens)")]
    BudgetExceeded { budget: usize, required: usize },

    #[error("source of {len} tokens exceeds the backend maximum of {max}")]
    SourceTooLong { len: usize, max: usize },

    #[error("backend not trainable")]
    NotTrainable,

    #[error("embeddings unsupported")]
    EmbeddingsUnsupported,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("while scoring quotation {quote}: {source}")]
    Scoring {
        quote: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no candidates")]
    NoCandidates,

    #[error("k = {k} is out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("predictions do not match the split: missing {missing:?}, extra {extra:?}")]
    Coverage {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("ranking for {quote} has depth {depth}, fewer than k = {k}")]
    InsufficientDepth { quote: String, depth: usize, k: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("encoder baseline cannot handle unseen speakers: {0}")]
    UnseenSpeakers(String),

    #[error("llm client error: {message}")]
    Client { message: String, retriable: bool },

    #[error("t-SNE failed: {0}")]
    Tsne(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

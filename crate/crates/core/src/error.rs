use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // vectors
    #[error("cannot normalize an all-zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    // indexing
    #[error("document has no non-whitespace text")]
    EmptyDocument,
    #[error("chunk id {chunk_id} out of range 1..={len}")]
    OutOfRange { chunk_id: u32, len: u32 },
    #[error("index contains no chunks")]
    EmptyIndex,
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("summarizer returned an empty summary for window {window} of {doc_id:?}")]
    EmptySummary { doc_id: String, window: u32 },
    #[error("corrupt index at {path}: {reason}")]
    CorruptIndex { path: PathBuf, reason: String },
    #[error("index format version {found} is not supported (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("embedder {requested:?} does not match the index embedder {indexed:?}")]
    EmbedderMismatch { requested: String, indexed: String },

    // selection
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("summary {0} is not in the candidate pool")]
    NotInPool(u32),
    #[error("summary {0} is already selected")]
    AlreadySelected(u32),
    #[error("pool of {0} summaries is too large for exhaustive search (max 15)")]
    PoolTooLarge(usize),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),

    // retrieval / metrics
    #[error("gold set is empty")]
    EmptyGold,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),

    // providers
    #[error("provider {provider} failed: {message}")]
    ProviderFailure {
        provider: String,
        message: String,
        retryable: bool,
    },
    #[error("provider {0} timed out")]
    Timeout(String),

    // prompts and parsing
    #[error("template {template} is missing a binding for {{{name}}}")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template} has no placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("update output has no <action> tag")]
    MissingAction,
    #[error("invalid action {0:?}")]
    InvalidAction(String),
    #[error("REFINE action without <refined_signature>")]
    MissingRefinement,
    #[error("unparseable answer: {0}")]
    UnparseableAnswer(String),

    // evaluation
    #[error("series {0:?} has no books")]
    EmptySeries(String),
    #[error("malformed claim pair {pair_id:?}: {reason}")]
    MalformedPair { pair_id: String, reason: String },
    #[error("invalid example {id:?}: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("report aggregates do not match per-example records: {0}")]
    AggregateMismatch(String),

    // plumbing
    #[error("unknown {kind} strategy {name:?} (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    pub(crate) fn read(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::Read {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn provider(provider: impl Into<String>, message: impl Into<String>, retryable: bool) -> Self {
        Error::ProviderFailure {
            provider: provider.into(),
            message: message.into(),
            retryable,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::ProviderFailure { retryable: true, .. } | Error::Timeout(_)
        )
    }
}

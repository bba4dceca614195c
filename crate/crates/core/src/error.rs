use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: malformed record: {message}", path.display())]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{record}` is missing field `{field}`")]
    MissingField { record: String, field: &'static str },

    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),

    #[error("language `{lang}` has {count} document(s); at least 2 are required for a split")]
    TooFewDocuments { lang: String, count: usize },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("k = {k} is not realizable by the language tree; achievable values: {achievable:?}")]
    UnrealizableK { k: usize, achievable: Vec<usize> },

    #[error("language `{0}` is not covered by the cluster model")]
    UncoveredLanguage(String),

    #[error("missing feature vector for language `{0}`")]
    MissingFeature(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("example {example}: prompt of {len} tokens exceeds max_seq_len {max}")]
    PromptTooLong {
        example: usize,
        len: usize,
        max: usize,
    },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("batch has no unmasked targets")]
    FullyMasked,

    #[error("optimizer schedule exhausted: step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("data stream ended after {consumed} of {budget} tokens")]
    StreamExhausted { consumed: u64, budget: u64 },

    #[error("expert `{expert}` has no training data: {reason}")]
    EmptyExpertStream { expert: String, reason: String },

    #[error("invalid checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("checksum mismatch for {}: manifest says {expected}, file hashes to {found}", path.display())]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("duplicate expert id `{0}`")]
    DuplicateExpert(String),

    #[error("unknown expert `{0}`")]
    UnknownExpert(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("`{command}` requires `{prerequisite}` to have been run first")]
    MissingPrerequisite {
        command: String,
        prerequisite: String,
    },

    #[error("`{command}` requires `{prerequisite}` to be re-run first: its inputs changed")]
    StalePrerequisite {
        command: String,
        prerequisite: String,
    },

    #[error("workdir is locked by another process ({})", .0.display())]
    Locked(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("worker thread panicked while training `{0}`")]
    WorkerPanic(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// `true` for errors caused by user input (bad config, missing files,
    /// out-of-order commands), `false` for internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::WorkerPanic(_) | Error::NonFiniteGradient(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

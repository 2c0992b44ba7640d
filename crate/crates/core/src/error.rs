use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("sequence of length {len} is too short for future window {window}")]
    InsufficientLength { len: usize, window: usize },
    #[error("empty chunk")]
    EmptyChunk,
    #[error("empty update: no new behaviors")]
    EmptyUpdate,
    #[error("cannot pool over zero positions")]
    EmptyPool,
    #[error("stale state: produced by parameters {state}, current parameters are {params}")]
    StaleState { state: String, params: String },
    #[error("degenerate embedding at index {index} (zero norm)")]
    DegenerateEmbedding { index: usize },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("state record version {found} needs migration to {expected}")]
    Migration { found: u32, expected: u32 },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("persona spec error: {0}")]
    Spec(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("schedule error: step {step} beyond total {total}")]
    Schedule { step: usize, total: usize },
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },
    #[error("history of {len} behaviors exceeds the parallel budget of {budget}; use chunkwise recomputation")]
    Budget { len: usize, budget: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("data exhausted: user {user} has {available} behaviors, schedule needs {needed}")]
    DataExhausted { user: u64, available: usize, needed: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

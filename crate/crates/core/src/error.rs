use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline. The variant decides the CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("reserved token in input: {0}")]
    ReservedToken(String),
    #[error("id out of range: {id} (vocabulary size {size})")]
    IdOutOfRange { id: u32, size: usize },

    #[error("duplicate entity: {0}")]
    DuplicateEntity(String),
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsatisfiable placeholder {{{0}}}")]
    UnsatisfiablePlaceholder(String),
    #[error("invalid template {id}: {message}")]
    Template { id: String, message: String },

    #[error("overlapping spans")]
    OverlappingSpans,
    #[error("sequence too long: document {doc_id} needs {len} positions, limit is {max_len}")]
    SequenceTooLong { doc_id: String, len: usize, max_len: usize },
    #[error("empty spans batch")]
    EmptySpansBatch,
    #[error("no mask token")]
    NoMaskToken,
    #[error("no feasible token under the entity constraint")]
    NoFeasibleToken,

    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("LoRA adapters already attached")]
    LoraAlreadyAttached,

    #[error("misaligned evaluation ids: {0:?}")]
    Misaligned(Vec<String>),
    #[error("empty case list")]
    EmptyCases,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

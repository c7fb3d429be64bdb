use std::path::PathBuf;

use crate::tensor::TensorId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite {what} ({context})")]
    NonFinite { what: &'static str, context: String },

    #[error("unknown tensor id {0}")]
    UnknownTensor(TensorId),

    #[error("overlapping mask slices on tensor {tensor}: rows [{first_begin},{first_end}) and [{second_begin},{second_end})")]
    OverlappingSlices {
        tensor: TensorId,
        first_begin: usize,
        first_end: usize,
        second_begin: usize,
        second_end: usize,
    },

    #[error("row range [{begin},{end}) out of bounds for {rows} rows")]
    RowRange { begin: usize, end: usize, rows: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: usize, vocab: usize },

    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("invalid cost policy: {0}")]
    Policy(String),

    #[error("chunk count exceeds row granularity: K={k} but only {rows} trainable rows")]
    ChunkCount { k: usize, rows: u64 },

    #[error("byte budget {budget} is below one-row granularity ({row_cost} bytes)")]
    Budget { budget: u64, row_cost: u64 },

    #[error("invalid hyperparameter: {0}")]
    Hyper(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("schedule contract violation: {0}")]
    Schedule(String),

    #[error("memory trace is empty")]
    EmptyTrace,

    #[error("missing argument for {method}: {argument}")]
    MissingArgument { method: &'static str, argument: &'static str },

    #[error("config field `{field}`: {constraint}")]
    Config { field: String, constraint: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("step {step}, chunk {chunk}: {source}")]
    AtStep {
        step: usize,
        chunk: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config { field: field.into(), constraint: constraint.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { context: path.into(), source }
    }

    pub(crate) fn at_step(self, step: usize, chunk: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { step, chunk, source: Box::new(e) },
        }
    }
}

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged after step {last_finite_step} (loss not finite or blown up)")]
    Diverged { last_finite_step: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("invalid edit request: {0}")]
    InvalidRequest(String),
    #[error("{0}")]
    Missing(String),
    #[error("edit {index} failed: {source}")]
    EditFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("sample larger than population ({k} > {population})")]
    SampleTooLarge { k: usize, population: usize },
    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("input length {len} exceeds maximum {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("target length {len} exceeds maximum {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("chunk size {chunk_size} exceeds the {count} instances of task type {task_type}")]
    ChunkTooLarge {
        chunk_size: usize,
        count: usize,
        task_type: u32,
    },
    #[error("unsmoothed KL undefined: category {0} has zero global probability")]
    UnsmoothedKl(u64),
    #[error("insufficient instances: need {needed}, have {available}")]
    Insufficient { needed: usize, available: usize },
    #[error("evaluation epochs differ between trajectories")]
    MismatchedEpochs,
}

pub type Result<T> = std::result::Result<T, Error>;

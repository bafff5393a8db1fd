use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("example index {index} out of range for dataset of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("batch size must divide dataset size (N = {n}, B = {batch_size})")]
    IndivisibleBatch { n: usize, batch_size: usize },

    #[error("enumeration of {what} needs {count} items, above the cap of {cap}; use Monte Carlo sampling")]
    EnumerationCap {
        what: &'static str,
        count: u128,
        cap: u128,
    },

    #[error("iterate diverged at step {step} (non-finite or magnitude above 1e12)")]
    Diverged { step: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix for example {0} is not symmetric")]
    NotSymmetric(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model kind does not support this operation: {0}")]
    Unsupported(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

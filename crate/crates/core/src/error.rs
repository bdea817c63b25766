use crate::ingest::IngestError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step k={k} in window {window}")]
    NonFiniteLoss { k: usize, window: usize },
    #[error("model parameters contain non-finite values")]
    NonFiniteParams,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u8, expected: u8 },
    #[error("hawkes: {0}")]
    Hawkes(String),
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

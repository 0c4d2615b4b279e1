use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("time {t} is out of range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("time {0} is not aligned with the grid")]
    OffGrid(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("non-finite state at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },

    #[error("missing snapshot for step {0}")]
    MissingSnapshot(usize),
}

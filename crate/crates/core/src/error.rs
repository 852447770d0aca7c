use thiserror::Error;

use crate::riemannian_prox::IterateTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate matrix: {0}")]
    Degenerate(String),
    #[error("ill-conditioned matrix (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("invalid mixture weight: {0}")]
    InvalidWeight(String),
    #[error("gradient diverged: {0}")]
    DivergedGradient(String),
    #[error("optimizer stalled after {halvings} consecutive step-size halvings")]
    Stalled {
        halvings: usize,
        trace: Box<IterateTrace>,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate batch: {dropped} of {total} samples have underflowing old-policy density")]
    DegenerateBatch { dropped: usize, total: usize },
    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint parse error at line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

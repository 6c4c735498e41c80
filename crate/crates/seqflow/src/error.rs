use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward error: {0}")]
    Backward(String),

    #[error("cache mismatch: expected {expected} committed positions, found {found}")]
    CacheMismatch { expected: usize, found: usize },

    #[error("fixed-point iteration diverged at block {block}: residual non-decreasing for {stalled} iterations (last residual {residual:.3e})")]
    Divergence {
        block: usize,
        stalled: usize,
        residual: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sink failure at frame {frame}: {source}")]
    Sink {
        frame: usize,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

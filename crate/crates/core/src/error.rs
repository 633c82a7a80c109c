use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BufferLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("kron result would be {rows}x{cols} ({required} entries), above the {limit}-entry guard")]
    KronTooLarge { rows: usize, cols: usize, required: usize, limit: usize },

    #[error("cannot take {k} of {len} values")]
    TopKTooLarge { k: usize, len: usize },

    #[error("{what} must be a unit vector, norm is {norm}")]
    NotUnit { what: &'static str, norm: f64 },

    #[error("forward cache does not belong to this model")]
    StaleCache,

    #[error("non-finite loss at layer {layer}")]
    NonFiniteLoss { layer: usize },

    #[error("no taps accumulated, cannot finalize")]
    EmptyAccumulator,

    #[error("full Fisher of size m*n = {size} exceeds the {limit} oracle guard")]
    FullFisherTooLarge { size: usize, limit: usize },

    #[error("rank {rank} exceeds the {live} live candidates")]
    RankTooLarge { rank: usize, live: usize },

    #[error("index {index} refers to a dead candidate")]
    DeadIndex { index: usize },

    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("scaling value {value} at position {index} is negative")]
    NegativeSigma { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite loss on statistics minibatch {batch}")]
    NonFiniteBatchLoss { batch: usize },

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}

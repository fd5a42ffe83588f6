use thiserror::Error;

use crate::types::RequestId;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,

    #[error("empty profiling grid")]
    EmptyGrid,

    #[error("need at least 4 samples to fit the latency model, got {0}")]
    InsufficientSamples(usize),

    #[error("degenerate profiling grid")]
    DegenerateGrid,

    #[error("online pages are not evictable (request {0})")]
    OnlineNotEvictable(RequestId),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error("simulated time exceeded max_sim_time ({limit_s} s) at {now_s} s: {diagnostic}")]
    Livelock {
        limit_s: f64,
        now_s: f64,
        diagnostic: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

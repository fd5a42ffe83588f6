//! Discrete-event simulator and scheduling library for co-serving
//! latency-critical (online) and best-effort (offline) LLM inference on one
//! engine.
//!
//! GPU execution is replaced by a latency oracle; the scheduler only sees a
//! latency model fitted to profiled samples of that oracle. The latency model
//! is generic over the scalar type; the simulation itself runs in `f64`.

pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod metrics;
pub mod perf_model;
pub mod preemption;
pub mod presets;
pub mod scalar;
pub mod scheduler;
pub mod time;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
pub use time::SimTime;
pub use types::{ClusterConfig, Request, RequestClass, RequestId, RequestState, SloConfig};

pub type PerfCoefficients = perf_model::Coefficients<f64>;
pub type PerfCoefficientsF32 = perf_model::Coefficients<f32>;
pub type OracleParams = perf_model::OracleParams<f64>;
pub type OracleParamsF32 = perf_model::OracleParams<f32>;

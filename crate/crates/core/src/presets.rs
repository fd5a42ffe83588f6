//! Calibrated model configurations and the standard experiment setups.
//!
//! The 8B oracle is pinned by two measured chunk latencies: a 2048-token
//! prefill takes 51 ms with no prior context and 124 ms on top of a 40K-token
//! context. The 70B oracle reproduces a 262 ms average iteration on four
//! tensor-parallel GPUs.

use serde::{Deserialize, Serialize};

use crate::engine::{run_with_base, EngineOptions, RunConfig, WorkloadSource};
use crate::error::{Error, Result};
use crate::kv_cache::KvMode;
use crate::perf_model::BatchShape;
use crate::preemption::safepoint_cost;
use crate::scheduler::{Features, SchedulerPolicy};
use crate::types::{ClusterConfig, SloConfig, GIB, KIB};
use crate::workload::{LengthSpec, OfflineSpec, OnlineSpec, WorkloadSpec};
use crate::OracleParams;

/// Oracle and cluster shape for one served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    pub oracle: OracleParams,
    pub cluster: ClusterConfig,
    pub notes: String,
}

pub const ANCHOR_CHUNK: u32 = 2048;
pub const ANCHOR_CONTEXT: u32 = 40960;
pub const ANCHOR_FRESH_MS: f64 = 51.0;
pub const ANCHOR_LONG_MS: f64 = 124.0;

/// Per-context-token memory cost (ms) of the 8B preset.
pub const LLAMA8B_K4: f64 = 1.5e-4;
/// Per-iteration constant (ms) of the 8B preset.
pub const LLAMA8B_K5: f64 = 6.0;

/// Solves `k1` and `k2` so the two prefill anchors hold exactly for the
/// given memory and constant terms (`k3 = 0` on one GPU).
pub fn anchored_oracle(k4: f64, k5: f64, noise_cv: f64) -> Result<OracleParams> {
    let p = ANCHOR_CHUNK as f64;
    let c = ANCHOR_CONTEXT as f64;
    let k2 = (ANCHOR_LONG_MS - ANCHOR_FRESH_MS - k4 * c) / (p * c);
    let k1 = (ANCHOR_FRESH_MS - k5 - k2 * p * p - k4 * p) / p;
    let o = OracleParams {
        k1,
        k2,
        k3: 0.0,
        k4,
        k5,
        noise_cv,
    };
    if k1 < 0.0 || k2 < 0.0 {
        return Err(Error::Config(format!(
            "k4={k4}, k5={k5} leave no room for the anchors"
        )));
    }
    o.validate()?;
    Ok(o)
}

pub fn llama8b() -> ModelPreset {
    ModelPreset {
        name: "llama-3.1-8b".into(),
        oracle: anchored_oracle(LLAMA8B_K4, LLAMA8B_K5, 0.01).expect("valid anchors"),
        cluster: ClusterConfig {
            num_layers: 32,
            kv_bytes_per_token: 128 * KIB,
            gpu_kv_capacity: 60 * GIB,
            safepoint_check_cost: safepoint_cost(1, true),
            tp_degree: 1,
            ..ClusterConfig::default()
        },
        notes: format!(
            "one GPU; k1,k2 solved from {ANCHOR_FRESH_MS} ms at (P={ANCHOR_CHUNK}, C=0) and {ANCHOR_LONG_MS} ms at \
             (P={ANCHOR_CHUNK}, C={ANCHOR_CONTEXT}); k4={LLAMA8B_K4}, k5={LLAMA8B_K5} chosen; 60 GiB KV pool"
        ),
    }
}

pub const LLAMA70B_ITERATION_MS: f64 = 262.0;

pub fn llama70b() -> ModelPreset {
    let (k2, k3, k4, k5) = (1.6e-6, 0.008, 2.5e-4, 15.0);
    let p = ANCHOR_CHUNK as f64;
    let c = ANCHOR_CHUNK as f64;
    // 262 ms for a 2048-token chunk over a 2048-token context
    let k1 = (LLAMA70B_ITERATION_MS - k5 - k2 * p * (p + c) - k4 * (p + c)) / p - k3;
    ModelPreset {
        name: "llama-3.1-70b".into(),
        oracle: OracleParams { k1, k2, k3, k4, k5, noise_cv: 0.01 },
        cluster: ClusterConfig {
            num_layers: 80,
            kv_bytes_per_token: 320 * KIB,
            gpu_kv_capacity: 4 * 40 * GIB,
            d2h_bandwidth: 4.0 * 37.0 * GIB as f64,
            h2d_bandwidth: 4.0 * 37.0 * GIB as f64,
            safepoint_check_cost: safepoint_cost(4, false),
            tp_degree: 4,
            ..ClusterConfig::default()
        },
        notes: format!(
            "four GPUs, tensor parallel; {LLAMA70B_ITERATION_MS} ms at (P=2048, C=2048); 80 layers, 4-layer interval"
        ),
    }
}

/// Representative iteration of a preset: one 2048-token chunk over a
/// 2048-token context.
pub fn reference_shape() -> BatchShape {
    BatchShape::single(ANCHOR_CHUNK, ANCHOR_CHUNK)
}

/// Co-serving scenario: Gamma online arrivals plus a standing offline backlog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub rate: f64,
    pub cv: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub duration: f64,
    pub backlog: u32,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            rate: 2.0,
            cv: 0.5,
            input_tokens: 4096,
            output_tokens: 256,
            duration: 600.0,
            backlog: 256,
            seed: 1,
        }
    }
}

pub fn scenario_config(
    preset: &ModelPreset,
    policy: SchedulerPolicy,
    slo: SloConfig,
    sc: &Scenario,
) -> RunConfig {
    RunConfig {
        cluster: preset.cluster.clone(),
        oracle: preset.oracle,
        policy,
        features: None,
        slo,
        workload: WorkloadSource::Synthetic(WorkloadSpec {
            online: OnlineSpec {
                rate: sc.rate,
                cv: sc.cv,
                duration: sc.duration,
                lengths: LengthSpec::fixed(sc.input_tokens, sc.output_tokens),
            },
            offline: OfflineSpec {
                backlog: sc.backlog,
                lengths: LengthSpec::fixed(sc.input_tokens, sc.output_tokens),
            },
            seed: sc.seed,
        }),
        seed: sc.seed,
        max_sim_time: None,
        engine: EngineOptions {
            log_events: false,
            ..EngineOptions::default()
        },
        notes: Some(preset.notes.clone()),
    }
}

/// SLO targets equal to the P99 TTFT and TBT an online-only run of the same
/// workload achieves; the returned config's scale is 1.
pub fn derive_slo(base: &RunConfig) -> Result<SloConfig> {
    let mut cfg = base.clone();
    cfg.policy = SchedulerPolicy::OnlineOnly { chunk_size: 2048 };
    cfg.features = None;
    if let WorkloadSource::Synthetic(w) = &mut cfg.workload {
        w.offline.backlog = 0;
    }
    cfg.engine.log_events = false;
    let r = run_with_base(&cfg, None)?.report;
    if !(r.ttft_p99 > 0.0 && r.tbt_p99 > 0.0) {
        return Err(Error::Config(
            "online-only run produced no latency samples".into(),
        ));
    }
    Ok(SloConfig {
        ttft_slo: r.ttft_p99,
        tbt_slo: r.tbt_p99,
        scale: 1.0,
        safety_margin: base.slo.safety_margin,
    })
}

/// Steps of the mechanism ablation, each adding one mechanism to the last.
pub fn ablation_features() -> [(&'static str, Features); 3] {
    [
        (
            "slo_aware",
            Features {
                layerwise_preemption: false,
                kv_mode: KvMode::Recompute,
            },
        ),
        (
            "plus_layerwise",
            Features {
                layerwise_preemption: true,
                kv_mode: KvMode::Recompute,
            },
        ),
        (
            "plus_incremental_kv",
            Features {
                layerwise_preemption: true,
                kv_mode: KvMode::Incremental,
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_hold() {
        let o = llama8b().oracle;
        let fresh = o.noise_free_latency(&BatchShape::single(2048, 0));
        let long = o.noise_free_latency(&BatchShape::single(2048, 40960));
        assert!((fresh - 51.0).abs() < 1e-9, "{fresh}");
        assert!((long - 124.0).abs() < 1e-9, "{long}");
        assert!(o.k1 > 0.0 && o.k2 > 0.0);
    }

    #[test]
    fn big_model_iteration() {
        let p = llama70b();
        let ms = p.oracle.noise_free_latency(&reference_shape());
        assert!((ms - 262.0).abs() < 1e-9);
        assert!((p.cluster.safepoint_check_cost - 167.2e-6).abs() < 1e-12);
        assert_eq!(p.cluster.safepoints_per_iteration(), 19);
    }

    #[test]
    fn anchors_reject_oversized_terms() {
        assert!(anchored_oracle(0.01, 6.0, 0.0).is_err());
        assert!(anchored_oracle(3e-4, 60.0, 0.0).is_err());
    }
}

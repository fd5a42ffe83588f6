#![allow(dead_code)]

use coserve::engine::{EngineOptions, RunConfig, WorkloadSource};
use coserve::kv_cache::KvMode;
use coserve::presets;
use coserve::scheduler::{Features, SchedulerPolicy};
use coserve::types::{GIB, KIB};
use coserve::workload::{LengthSpec, OfflineSpec, OnlineSpec, WorkloadSpec};
use coserve::SloConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POLICIES: [SchedulerPolicy; 4] = [
    SchedulerPolicy::ConServe,
    SchedulerPolicy::SarathiPreemptive { chunk_size: 2048 },
    SchedulerPolicy::NonPreemptive { chunk_size: 2048 },
    SchedulerPolicy::OnlineOnly { chunk_size: 2048 },
];

/// A small, memory-tight random configuration with invariant checking on.
pub fn fuzz_config(seed: u64, max_events: u64) -> RunConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cluster = presets::llama8b().cluster;
    cluster.kv_bytes_per_token = 128 * KIB;
    let page = cluster.page_bytes();
    cluster.gpu_kv_capacity = page * rng.random_range(600..4000u64);
    cluster.host_kv_capacity = page * rng.random_range(50..8000u64);
    cluster.d2h_bandwidth = rng.random_range(2.0..64.0) * GIB as f64;
    cluster.h2d_bandwidth = cluster.d2h_bandwidth;
    cluster.safepoint_interval_layers = rng.random_range(1..=8);

    let policy = POLICIES[rng.random_range(0..POLICIES.len())];
    let chunk = rng.random_range(64..=2048u32);
    let policy = match policy {
        SchedulerPolicy::SarathiPreemptive { .. } => {
            SchedulerPolicy::SarathiPreemptive { chunk_size: chunk }
        }
        SchedulerPolicy::NonPreemptive { .. } => {
            SchedulerPolicy::NonPreemptive { chunk_size: chunk }
        }
        SchedulerPolicy::OnlineOnly { .. } => SchedulerPolicy::OnlineOnly { chunk_size: chunk },
        p => p,
    };
    let kv_mode = [KvMode::Recompute, KvMode::Swap, KvMode::Incremental][rng.random_range(0..3)];
    let features = Features {
        layerwise_preemption: rng.random_bool(0.5),
        kv_mode,
    };

    let mut oracle = presets::llama8b().oracle;
    oracle.noise_cv = rng.random_range(0.0..0.05);
    let slo = SloConfig {
        ttft_slo: rng.random_range(0.05..2.0),
        tbt_slo: rng.random_range(0.02..0.3),
        scale: rng.random_range(1.0..2.0),
        safety_margin: rng.random_range(0.0..0.1),
    };
    let online = LengthSpec::fixed(rng.random_range(16..3000), rng.random_range(1..200));
    let offline = LengthSpec::fixed(rng.random_range(16..3000), rng.random_range(1..200));
    RunConfig {
        cluster,
        oracle,
        policy,
        features: Some(features),
        slo,
        workload: WorkloadSource::Synthetic(WorkloadSpec {
            online: OnlineSpec {
                rate: rng.random_range(0.5..8.0),
                cv: rng.random_range(0.3..2.0),
                duration: 120.0,
                lengths: online,
            },
            offline: OfflineSpec {
                backlog: rng.random_range(0..40),
                lengths: offline,
            },
            seed,
        }),
        seed,
        max_sim_time: None,
        engine: EngineOptions {
            check_invariants: true,
            max_events: Some(max_events),
            log_events: false,
            ..EngineOptions::default()
        },
        notes: None,
    }
}

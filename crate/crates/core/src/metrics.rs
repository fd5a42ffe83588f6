//! Online latency and offline throughput accounting.
//!
//! Percentiles are nearest-rank: the q-quantile of n sorted samples is the
//! element at 1-based rank `ceil(q·n)`.

use serde::{Deserialize, Serialize};

use crate::types::{Request, RequestClass, SloConfig};

/// Nearest-rank percentile; sorts `samples` in place.
pub fn percentile_nearest_rank(samples: &mut [f64], q: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    // The epsilon keeps 0.99·100 from rounding up to rank 100.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Some(samples[rank - 1])
}

/// Seconds from arrival to the end of the iteration that finished the prefill.
/// `None` while the prefill is incomplete.
pub fn ttft(req: &Request) -> Option<f64> {
    req.first_token_time
        .map(|t| t.saturating_sub(req.arrival_time).as_secs_f64())
}

/// Gaps between consecutive output tokens, in seconds. The prefill-completing
/// iteration emits token 1, so a request with `decode_done` tokens yields
/// `decode_done − 1` samples.
pub fn tbt_samples(req: &Request) -> Vec<f64> {
    req.token_completion_times
        .windows(2)
        .map(|w| (w[1] - w[0]).as_secs_f64())
        .collect()
}

/// Committed prefill and decode tokens of offline requests per second of
/// `horizon`. Recomputed tokens never advance progress and so are excluded.
pub fn offline_throughput<'a>(
    requests: impl IntoIterator<Item = &'a Request>,
    horizon: f64,
) -> f64 {
    class_throughput(requests, RequestClass::Offline, horizon)
}

pub fn class_throughput<'a>(
    requests: impl IntoIterator<Item = &'a Request>,
    class: RequestClass,
    horizon: f64,
) -> f64 {
    if horizon <= 0.0 {
        return 0.0;
    }
    let tokens: u64 = requests
        .into_iter()
        .filter(|r| r.class == class)
        .map(|r| r.context_len() as u64)
        .sum();
    tokens as f64 / horizon
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferredBytes {
    pub d2h: u64,
    pub h2d: u64,
}

/// Counters the engine accumulates during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub forced_admissions: u64,
    pub preemptions: u64,
    pub recomputed_tokens: u64,
    pub transferred_bytes: TransferredBytes,
    pub iterations: u64,
    pub stall_time_s: f64,
    pub drained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    pub ttft_p99: f64,
    pub ttft_max: f64,
    pub tbt_p50: f64,
    pub tbt_p90: f64,
    pub tbt_p99: f64,
    pub tbt_max: f64,
    pub ttft_attainment: f64,
    pub tbt_attainment: f64,
    /// Tokens per second.
    pub offline_throughput: f64,
    pub online_throughput: f64,
    pub forced_admissions: u64,
    pub preemptions: u64,
    pub recomputed_tokens: u64,
    pub transferred_bytes: TransferredBytes,
    pub horizon_s: f64,
    pub online_requests: u64,
    /// Online requests whose prefill never completed; excluded from TTFT.
    pub online_unfinished_prefill: u64,
    pub offline_completed: u64,
    pub iterations: u64,
    pub stall_time_s: f64,
    pub drained: bool,
}

struct Summary {
    p50: f64,
    p90: f64,
    p99: f64,
    max: f64,
}

fn summarize(samples: &mut [f64]) -> Summary {
    let p = |s: &mut [f64], q| percentile_nearest_rank(s, q).unwrap_or(0.0);
    Summary {
        p50: p(samples, 0.5),
        p90: p(samples, 0.9),
        p99: p(samples, 0.99),
        max: p(samples, 1.0),
    }
}

fn attainment(samples: &[f64], target: f64) -> f64 {
    if samples.is_empty() {
        return 1.0;
    }
    samples.iter().filter(|&&s| s <= target).count() as f64 / samples.len() as f64
}

impl MetricsReport {
    pub fn compute(
        requests: &[Request],
        slo: &SloConfig,
        horizon: f64,
        counters: &RunCounters,
    ) -> Self {
        let online: Vec<&Request> = requests.iter().filter(|r| r.is_online()).collect();
        let mut ttfts: Vec<f64> = online.iter().filter_map(|r| ttft(r)).collect();
        let mut tbts: Vec<f64> = online.iter().flat_map(|r| tbt_samples(r)).collect();
        let ttft_attainment = attainment(&ttfts, slo.ttft_target());
        let tbt_attainment = attainment(&tbts, slo.tbt_target());
        let t = summarize(&mut ttfts);
        let b = summarize(&mut tbts);
        MetricsReport {
            ttft_p50: t.p50,
            ttft_p90: t.p90,
            ttft_p99: t.p99,
            ttft_max: t.max,
            tbt_p50: b.p50,
            tbt_p90: b.p90,
            tbt_p99: b.p99,
            tbt_max: b.max,
            ttft_attainment,
            tbt_attainment,
            offline_throughput: offline_throughput(requests, horizon),
            online_throughput: class_throughput(requests, RequestClass::Online, horizon),
            forced_admissions: counters.forced_admissions,
            preemptions: counters.preemptions,
            recomputed_tokens: counters.recomputed_tokens,
            transferred_bytes: counters.transferred_bytes,
            horizon_s: horizon,
            online_requests: online.len() as u64,
            online_unfinished_prefill: online
                .iter()
                .filter(|r| r.first_token_time.is_none())
                .count() as u64,
            offline_completed: requests
                .iter()
                .filter(|r| !r.is_online() && r.is_finished())
                .count() as u64,
            iterations: counters.iterations,
            stall_time_s: counters.stall_time_s,
            drained: counters.drained,
        }
    }
}

/// One row of the 5-second time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub p99_ttft_5s: f64,
    pub p99_tbt_5s: f64,
    pub offline_tput_5s: f64,
}

pub const WINDOW_S: f64 = 5.0;

/// P99 online latencies per window (TTFT bucketed by first-token time, TBT by
/// token time) and offline tokens per second per window.
pub fn time_series(
    requests: &[Request],
    offline_tokens_per_window: &[u64],
    horizon: f64,
) -> Vec<TimeSeriesRow> {
    let windows = ((horizon / WINDOW_S).ceil() as usize).max(offline_tokens_per_window.len());
    let mut ttft_w: Vec<Vec<f64>> = vec![Vec::new(); windows];
    let mut tbt_w: Vec<Vec<f64>> = vec![Vec::new(); windows];
    let bucket = |t: f64| ((t / WINDOW_S) as usize).min(windows.saturating_sub(1));
    for r in requests.iter().filter(|r| r.is_online()) {
        if let (Some(v), Some(t)) = (ttft(r), r.first_token_time) {
            ttft_w[bucket(t.as_secs_f64())].push(v);
        }
        for (w, gap) in r.token_completion_times.windows(2).zip(tbt_samples(r)) {
            tbt_w[bucket(w[1].as_secs_f64())].push(gap);
        }
    }
    (0..windows)
        .map(|i| TimeSeriesRow {
            t: i as f64 * WINDOW_S,
            p99_ttft_5s: percentile_nearest_rank(&mut ttft_w[i], 0.99).unwrap_or(0.0),
            p99_tbt_5s: percentile_nearest_rank(&mut tbt_w[i], 0.99).unwrap_or(0.0),
            offline_tput_5s: offline_tokens_per_window.get(i).copied().unwrap_or(0) as f64
                / WINDOW_S,
        })
        .collect()
}

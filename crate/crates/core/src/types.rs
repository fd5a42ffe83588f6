//! Domain vocabulary shared by every module: requests, SLOs and cluster shape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;

/// Tokens per KV page.
pub const PAGE_TOKENS: u32 = 16;

pub const KIB: u64 = 1 << 10;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u32);

impl RequestId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestClass {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Queued,
    Running,
    Paused,
    Finished,
}

/// One inference request and its progress.
///
/// The iteration that completes the prefill also produces the first output
/// token, so `decode_done` becomes 1 at that point.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub class: RequestClass,
    pub arrival_time: SimTime,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub prefill_done: u32,
    pub decode_done: u32,
    pub state: RequestState,
    pub first_token_time: Option<SimTime>,
    pub token_completion_times: Vec<SimTime>,
}

impl Request {
    pub fn new(
        id: RequestId,
        class: RequestClass,
        arrival_time: SimTime,
        input_tokens: u32,
        output_tokens: u32,
    ) -> Self {
        Request {
            id,
            class,
            arrival_time,
            input_tokens,
            output_tokens,
            prefill_done: 0,
            decode_done: 0,
            state: RequestState::Queued,
            first_token_time: None,
            token_completion_times: Vec::new(),
        }
    }

    pub fn is_online(&self) -> bool {
        self.class == RequestClass::Online
    }

    pub fn context_len(&self) -> u32 {
        context_len(self)
    }

    pub fn remaining_prefill(&self) -> u32 {
        self.input_tokens - self.prefill_done
    }

    pub fn in_decode(&self) -> bool {
        self.prefill_done == self.input_tokens && self.decode_done < self.output_tokens
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Tokens of KV this request holds once it has run to completion.
    pub fn lifetime_tokens(&self) -> u32 {
        self.input_tokens + self.output_tokens
    }

    /// Records the commit of `tokens` prefill tokens at `now`.
    pub fn commit_prefill(&mut self, tokens: u32, now: SimTime) {
        debug_assert!(tokens <= self.remaining_prefill());
        self.prefill_done += tokens;
        if self.prefill_done == self.input_tokens {
            self.push_token(now);
        }
    }

    /// Records one decode step finishing at `now`.
    pub fn commit_decode(&mut self, now: SimTime) {
        debug_assert!(self.in_decode());
        self.push_token(now);
    }

    fn push_token(&mut self, now: SimTime) {
        if self.first_token_time.is_none() {
            self.first_token_time = Some(now);
        }
        debug_assert!(self.token_completion_times.last().is_none_or(|&t| t < now));
        self.decode_done += 1;
        self.token_completion_times.push(now);
        if self.decode_done == self.output_tokens {
            self.state = RequestState::Finished;
        }
    }
}

/// Tokens whose KV the request currently holds.
pub fn context_len(req: &Request) -> u32 {
    req.prefill_done + req.decode_done
}

/// Online latency objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConfig {
    /// Seconds.
    pub ttft_slo: f64,
    /// Seconds.
    pub tbt_slo: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.05
}

impl SloConfig {
    pub fn new(ttft_slo: f64, tbt_slo: f64) -> Self {
        SloConfig {
            ttft_slo,
            tbt_slo,
            scale: default_scale(),
            safety_margin: default_margin(),
        }
    }

    pub fn ttft_target(&self) -> f64 {
        self.ttft_slo * self.scale
    }

    pub fn tbt_target(&self) -> f64 {
        self.tbt_slo * self.scale
    }

    /// Per-iteration latency budget the scheduler plans against, in ms.
    pub fn tbt_budget_ms(&self) -> f64 {
        self.tbt_target() * (1.0 - self.safety_margin) * 1e3
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ttft_slo > 0.0 && self.tbt_slo > 0.0 && self.scale > 0.0) {
            return Err(Error::Config("SLO values must be strictly positive".into()));
        }
        if !(0.0..1.0).contains(&self.safety_margin) {
            return Err(Error::Config("safety_margin must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Shape of the simulated serving instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub num_layers: u32,
    pub safepoint_interval_layers: u32,
    pub kv_bytes_per_token: u64,
    pub gpu_kv_capacity: u64,
    pub host_kv_capacity: u64,
    /// Bytes per second, aggregated over tensor-parallel shards.
    pub d2h_bandwidth: f64,
    pub h2d_bandwidth: f64,
    /// Seconds per safepoint check.
    pub safepoint_check_cost: f64,
    pub tp_degree: u32,
    pub page_tokens: u32,
    pub max_batched_tokens: u32,
    /// Seconds added to every transfer job for gathering scattered pages.
    pub gather_latency: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_layers: 32,
            safepoint_interval_layers: 4,
            kv_bytes_per_token: 192 * KIB,
            gpu_kv_capacity: 60 * GIB,
            host_kv_capacity: 2048 * GIB,
            d2h_bandwidth: 37.0 * GIB as f64,
            h2d_bandwidth: 37.0 * GIB as f64,
            safepoint_check_cost: 21e-6,
            tp_degree: 1,
            page_tokens: PAGE_TOKENS,
            max_batched_tokens: 8192,
            gather_latency: 500e-6,
        }
    }
}

impl ClusterConfig {
    pub fn page_bytes(&self) -> u64 {
        self.kv_bytes_per_token * self.page_tokens as u64
    }

    pub fn gpu_pages(&self) -> u32 {
        (self.gpu_kv_capacity / self.page_bytes()).min(u32::MAX as u64) as u32
    }

    pub fn host_pages(&self) -> u32 {
        (self.host_kv_capacity / self.page_bytes()).min(u32::MAX as u64) as u32
    }

    /// Safepoints per uninterrupted iteration: one after every
    /// `safepoint_interval_layers` layers, excluding the final layer.
    pub fn safepoints_per_iteration(&self) -> u32 {
        (self.num_layers - 1) / self.safepoint_interval_layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.page_tokens != PAGE_TOKENS {
            return fail("page_tokens must be 16");
        }
        if self.num_layers == 0 || self.safepoint_interval_layers == 0 {
            return fail("num_layers and safepoint_interval_layers must be positive");
        }
        if self.kv_bytes_per_token == 0 || self.gpu_kv_capacity == 0 || self.host_kv_capacity == 0 {
            return fail("KV sizes and capacities must be positive");
        }
        if self.gpu_pages() == 0 {
            return fail("gpu_kv_capacity holds no page");
        }
        if !(self.d2h_bandwidth > 0.0 && self.h2d_bandwidth > 0.0) {
            return fail("bandwidths must be positive");
        }
        if !(self.safepoint_check_cost >= 0.0 && self.gather_latency >= 0.0) {
            return fail("costs must be non-negative");
        }
        if self.tp_degree == 0 || self.max_batched_tokens == 0 {
            return fail("tp_degree and max_batched_tokens must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prefill: u32, decode: u32) -> Request {
        let mut r = Request::new(
            RequestId(0),
            RequestClass::Online,
            SimTime::ZERO,
            50_000,
            300,
        );
        r.prefill_done = prefill;
        r.decode_done = decode;
        r
    }

    #[test]
    fn context_len_examples() {
        assert_eq!(context_len(&req(4096, 10)), 4106);
        assert_eq!(context_len(&req(0, 0)), 0);
        assert_eq!(context_len(&req(40960, 0)), 40960);
    }

    #[test]
    fn prefill_completion_emits_first_token() {
        let mut r = Request::new(RequestId(1), RequestClass::Online, SimTime::ZERO, 100, 3);
        r.commit_prefill(60, SimTime(10));
        assert_eq!(r.decode_done, 0);
        assert!(r.first_token_time.is_none());
        r.commit_prefill(40, SimTime(20));
        assert_eq!(r.decode_done, 1);
        assert_eq!(r.first_token_time, Some(SimTime(20)));
        r.commit_decode(SimTime(30));
        r.commit_decode(SimTime(40));
        assert!(r.is_finished());
        assert_eq!(r.token_completion_times.len(), r.decode_done as usize);
        assert_eq!(r.context_len(), 103);
    }

    #[test]
    fn cluster_defaults() {
        let c = ClusterConfig::default();
        c.validate().unwrap();
        assert_eq!(c.kv_bytes_per_token, 196_608);
        assert_eq!(c.safepoints_per_iteration(), 7);
        let mut bad = c.clone();
        bad.page_tokens = 32;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn slo_budget() {
        let mut s = SloConfig::new(1.0, 0.1);
        s.scale = 1.5;
        assert!((s.tbt_budget_ms() - 142.5).abs() < 1e-9);
        s.safety_margin = 1.0;
        assert!(s.validate().is_err());
    }
}

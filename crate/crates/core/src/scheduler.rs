//! Per-iteration batch composition.
//!
//! [`SchedulerPolicy::ConServe`] sizes every entry with the latency model so
//! the predicted iteration time stays inside the TBT budget, serving online
//! work first and filling the remaining slack with offline tokens. The other
//! policies fill a fixed token chunk without looking at latency.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{pages_for, Eviction, KvManager, KvMode};
use crate::perf_model::{
    can_schedule, max_throughput_tokens, BatchPlan, BatchShape, Candidate, EntryKind, PlanEntry,
};
use crate::time::SimTime;
use crate::types::{
    ClusterConfig, Request, RequestClass, RequestId, RequestState, SloConfig, PAGE_TOKENS,
};
use crate::PerfCoefficients;

pub const DEFAULT_CHUNK: u32 = 2048;
/// Prefill tokens an online request gets when not even one fits the budget.
pub const CHUNK_FLOOR: u32 = 128;

fn default_chunk() -> u32 {
    DEFAULT_CHUNK
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerPolicy {
    #[serde(rename = "conserve")]
    ConServe,
    SarathiPreemptive {
        #[serde(default = "default_chunk")]
        chunk_size: u32,
    },
    NonPreemptive {
        #[serde(default = "default_chunk")]
        chunk_size: u32,
    },
    OnlineOnly {
        #[serde(default = "default_chunk")]
        chunk_size: u32,
    },
}

/// Mechanisms that can be toggled independently of the batching policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub layerwise_preemption: bool,
    pub kv_mode: KvMode,
}

impl SchedulerPolicy {
    pub fn default_features(&self) -> Features {
        match self {
            SchedulerPolicy::ConServe => Features {
                layerwise_preemption: true,
                kv_mode: KvMode::Incremental,
            },
            _ => Features {
                layerwise_preemption: false,
                kv_mode: KvMode::Recompute,
            },
        }
    }

    pub fn chunk_size(&self) -> Option<u32> {
        match *self {
            SchedulerPolicy::ConServe => None,
            SchedulerPolicy::SarathiPreemptive { chunk_size }
            | SchedulerPolicy::NonPreemptive { chunk_size }
            | SchedulerPolicy::OnlineOnly { chunk_size } => Some(chunk_size),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerPolicy::ConServe => "conserve",
            SchedulerPolicy::SarathiPreemptive { .. } => "sarathi_preemptive",
            SchedulerPolicy::NonPreemptive { .. } => "non_preemptive",
            SchedulerPolicy::OnlineOnly { .. } => "online_only",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size() == Some(0) {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutcome {
    pub plan: BatchPlan,
    pub forced_admission: bool,
    /// Scheduling must wait for a request-granular swap until this time.
    pub stall_until: Option<SimTime>,
    pub evictions: Vec<(RequestId, Eviction)>,
    pub online_waiting_memory: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationCommit {
    pub completed: Vec<RequestId>,
    /// Requests whose KV grew or was rebuilt.
    pub touched: Vec<RequestId>,
    /// Tokens appended to KV.
    pub new_kv_tokens: u64,
    /// Prefill and decode progress, the quantity throughput counts.
    pub progress_tokens: u64,
    pub offline_progress_tokens: u64,
    /// KV tokens appended to requests that are still running.
    pub live_new_kv_tokens: u64,
    pub recomputed_tokens: u64,
}

struct Builder {
    plan: BatchPlan,
    shape: BatchShape,
    allocated: Vec<RequestId>,
    cap: u32,
    evictions: Vec<(RequestId, Eviction)>,
    stall_until: Option<SimTime>,
}

impl Builder {
    fn new(cap: u32) -> Self {
        Builder {
            plan: BatchPlan::new(),
            shape: BatchShape::default(),
            allocated: Vec::new(),
            cap,
            evictions: Vec::new(),
            stall_until: None,
        }
    }

    fn room(&self) -> u32 {
        self.cap.saturating_sub(self.plan.total_p as u32)
    }

    fn push(&mut self, req: &Request, kind: EntryKind, tokens: u32, context: u32) {
        self.plan.push(PlanEntry {
            request: req.id,
            class: req.class,
            kind,
            compute_tokens: tokens,
            context_tokens: context,
        });
        self.shape.add(tokens, context);
        self.allocated.push(req.id);
    }

    fn has_online_prefill(&self) -> bool {
        self.plan
            .entries
            .iter()
            .any(|e| e.class == RequestClass::Online && e.kind == EntryKind::Prefill)
    }
}

enum Offer {
    Added,
    /// The latency budget or token cap has no room left.
    Exhausted,
    NoMemory,
    /// KV is being restored; nothing to run yet.
    Waiting,
}

/// KV tokens an entry appends when it commits.
fn kv_growth(req: &Request, kind: EntryKind, tokens: u32) -> u32 {
    match kind {
        EntryKind::Prefill => tokens + u32::from(tokens == req.remaining_prefill()),
        EntryKind::Decode => 1,
        EntryKind::Recompute => 0,
    }
}

/// Most compute tokens (≤ `want`) whose KV growth fits in the pages
/// available to the request.
fn fit_tokens(kv: &KvManager, req: &Request, kind: EntryKind, want: u32) -> u32 {
    let pages = kv.pages(req.id).len() as u64;
    let room = ((pages + kv.available_for(req.id) as u64) * PAGE_TOKENS as u64)
        .saturating_sub(kv.tokens(req.id) as u64)
        .min(u32::MAX as u64) as u32;
    if kind == EntryKind::Decode {
        return want.min(room).min(1);
    }
    let mut t = want.min(room);
    if t > 0 && t == req.remaining_prefill() && t + 1 > room {
        t -= 1;
    }
    t
}

/// Scheduler queues and the model it plans with.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub policy: SchedulerPolicy,
    pub features: Features,
    pub coeffs: PerfCoefficients,
    pub slo: SloConfig,
    /// Online requests with prefill left, FIFO.
    pub online_queue: VecDeque<RequestId>,
    /// Online requests generating tokens.
    pub online_decoding: Vec<RequestId>,
    /// Offline requests not started yet, FIFO.
    pub offline_queue: VecDeque<RequestId>,
    /// Started offline requests outside the running batch, most recently paused first.
    pub paused_offline: Vec<RequestId>,
    pub running_batch: Option<BatchPlan>,
    /// Offline requests in the last dispatched batch.
    running_offline: Vec<RequestId>,
    started: BTreeMap<RequestId, u64>,
    next_start: u64,
    budget_ms: f64,
    max_batched_tokens: u32,
    prefetch_headroom_pages: u32,
}

impl SchedulerState {
    pub fn new(
        policy: SchedulerPolicy,
        features: Features,
        coeffs: PerfCoefficients,
        slo: SloConfig,
        cluster: &ClusterConfig,
    ) -> Self {
        let checks_ms = if features.layerwise_preemption {
            cluster.safepoints_per_iteration() as f64
                * SimTime::from_secs_f64(cluster.safepoint_check_cost).as_ms_f64()
        } else {
            0.0
        };
        // One nanosecond of slack absorbs rounding to the simulation clock.
        let budget_ms = slo.tbt_budget_ms() - checks_ms - 1e-6;
        SchedulerState {
            policy,
            features,
            coeffs,
            slo,
            online_queue: VecDeque::new(),
            online_decoding: Vec::new(),
            offline_queue: VecDeque::new(),
            paused_offline: Vec::new(),
            running_batch: None,
            running_offline: Vec::new(),
            started: BTreeMap::new(),
            next_start: 0,
            budget_ms,
            max_batched_tokens: cluster.max_batched_tokens,
            prefetch_headroom_pages: cluster.max_batched_tokens.div_ceil(PAGE_TOKENS),
        }
    }

    /// Predicted-latency ceiling for one iteration, in ms.
    pub fn budget_ms(&self) -> f64 {
        self.budget_ms
    }

    pub fn enqueue(&mut self, req: &Request) {
        match req.class {
            RequestClass::Online => self.online_queue.push_back(req.id),
            RequestClass::Offline => self.offline_queue.push_back(req.id),
        }
    }

    pub fn has_online_work(&self) -> bool {
        !self.online_queue.is_empty() || !self.online_decoding.is_empty()
    }

    pub fn offline_started(&self) -> usize {
        self.running_offline.len() + self.paused_offline.len()
    }

    /// All online work outside the running batch, as one prefill-style plan.
    pub fn pending_online_plan(&self, reqs: &[Request]) -> BatchPlan {
        let running = self.running_batch.as_ref();
        let mut plan = BatchPlan::new();
        for &id in self.online_queue.iter().chain(&self.online_decoding) {
            if running.is_some_and(|p| p.contains(id)) {
                continue;
            }
            let r = &reqs[id.index()];
            let (kind, p) = if r.in_decode() {
                (EntryKind::Decode, 1)
            } else {
                (EntryKind::Prefill, r.remaining_prefill())
            };
            plan.push(PlanEntry {
                request: id,
                class: r.class,
                kind,
                compute_tokens: p,
                context_tokens: r.context_len(),
            });
        }
        plan
    }

    /// Free pages plus what evicting every paused offline request would return.
    pub fn releasable_pages(&self, kv: &KvManager) -> u32 {
        kv.gpu_free_pages()
            + self
                .paused_offline
                .iter()
                .map(|&id| kv.releasable_pages(id))
                .sum::<u32>()
    }

    fn eviction_victims(&self, exclude: &BatchPlan) -> Vec<RequestId> {
        let mut v: Vec<RequestId> = match self.policy {
            SchedulerPolicy::ConServe => self
                .paused_offline
                .iter()
                .copied()
                .chain(self.running_offline.iter().rev().copied())
                .collect(),
            _ => {
                let mut all: Vec<RequestId> = self
                    .paused_offline
                    .iter()
                    .chain(&self.running_offline)
                    .copied()
                    .collect();
                all.sort_by_key(|id| std::cmp::Reverse(self.started.get(id).copied().unwrap_or(0)));
                all
            }
        };
        v.retain(|id| !exclude.contains(*id));
        v
    }

    /// Frees GPU pages held by paused offline requests, newest-paused first.
    /// Returns pages available immediately; may be fewer than `needed`.
    pub fn release_offline_kv_on_demand(
        &mut self,
        kv: &mut KvManager,
        needed_pages: u32,
        now: SimTime,
    ) -> u32 {
        let mut b = Builder::new(0);
        self.release_into(&mut b, kv, needed_pages, now)
    }

    fn release_into(
        &mut self,
        b: &mut Builder,
        kv: &mut KvManager,
        needed_pages: u32,
        now: SimTime,
    ) -> u32 {
        let mut freed = 0;
        if needed_pages == 0 {
            return 0;
        }
        for id in self.eviction_victims(&b.plan) {
            if freed >= needed_pages {
                break;
            }
            if kv.releasable_pages(id) == 0 {
                continue;
            }
            let ev = match self.features.kv_mode {
                KvMode::Incremental => kv.evict_offline_pages(id, needed_pages - freed, now),
                mode => kv.evict_request(id, mode, now),
            }
            .expect("victims are offline");
            freed += ev.freed_now;
            if let Some(done) = ev.swap_done {
                b.stall_until = Some(b.stall_until.map_or(done, |t: SimTime| t.max(done)));
                freed += ev.freed_later;
            }
            b.evictions.push((id, ev));
        }
        freed
    }

    /// Composes the next iteration. Must not be called while a batch runs.
    pub fn build_batch(
        &mut self,
        reqs: &mut [Request],
        kv: &mut KvManager,
        now: SimTime,
    ) -> BuildOutcome {
        debug_assert!(self.running_batch.is_none());
        let cap = match self.policy.chunk_size() {
            Some(c) => c,
            None => self.max_batched_tokens,
        };
        let mut b = Builder::new(cap);
        let mut out = BuildOutcome::default();
        let evict_for_online = !matches!(
            self.policy,
            SchedulerPolicy::NonPreemptive { .. } | SchedulerPolicy::OnlineOnly { .. }
        );

        // Online decodes always ride along.
        for id in self.online_decoding.clone() {
            if b.room() == 0 {
                break;
            }
            let r = &reqs[id.index()];
            if !self.ensure_pages(&mut b, kv, r, 1, evict_for_online, now) {
                out.online_waiting_memory = true;
                continue;
            }
            kv.allocate(id, r.class, 1).expect("checked");
            b.push(r, EntryKind::Decode, 1, r.context_len());
        }

        // Online prefills, FIFO.
        let conserve = self.policy == SchedulerPolicy::ConServe;
        for (i, id) in self.online_queue.clone().into_iter().enumerate() {
            let r = &reqs[id.index()];
            let remaining = r.remaining_prefill();
            let mut p = if conserve {
                can_schedule(
                    &self.coeffs,
                    &b.shape,
                    Candidate {
                        remaining,
                        context: r.context_len(),
                    },
                    self.budget_ms,
                    b.room(),
                )
            } else {
                remaining.min(b.room())
            };
            let mut forced = false;
            if p == 0 {
                if conserve && i == 0 && !b.has_online_prefill() {
                    p = remaining.min(CHUNK_FLOOR).min(b.room());
                    forced = p > 0;
                }
                if p == 0 {
                    break;
                }
            }
            let admitted = if matches!(self.policy, SchedulerPolicy::NonPreemptive { .. }) {
                kv.tracks(id)
                    || kv
                        .reserve_lifetime(id, r.class, r.lifetime_tokens())
                        .is_ok()
            } else {
                self.online_fits(reqs, kv, r)
            };
            if !admitted {
                out.online_waiting_memory = true;
                break;
            }
            let need = kv_growth(r, EntryKind::Prefill, p);
            self.ensure_pages(&mut b, kv, r, need, evict_for_online, now);
            let r = &reqs[id.index()];
            let fit = fit_tokens(kv, r, EntryKind::Prefill, p);
            if fit < p {
                out.online_waiting_memory = true;
            }
            if fit == 0 {
                break;
            }
            kv.allocate(id, r.class, kv_growth(r, EntryKind::Prefill, fit))
                .expect("checked");
            b.push(r, EntryKind::Prefill, fit, r.context_len());
            out.forced_admission |= forced;
            if fit < p {
                break;
            }
        }

        if b.stall_until.is_none() {
            let waiting = out.online_waiting_memory;
            match self.policy {
                SchedulerPolicy::ConServe if !waiting => {
                    self.conserve_offline(&mut b, reqs, kv, now)
                }
                SchedulerPolicy::SarathiPreemptive { .. } if !waiting => {
                    self.chunked_offline(&mut b, reqs, kv, true, now)
                }
                // Started requests hold lifetime reservations and must finish
                // to free memory for online work.
                SchedulerPolicy::NonPreemptive { .. } => {
                    self.chunked_offline(&mut b, reqs, kv, !waiting, now)
                }
                _ => {}
            }
        }

        if let Some(t) = b.stall_until {
            for &id in &b.allocated {
                kv.rollback(id);
            }
            out.stall_until = Some(t);
            out.evictions = b.evictions;
            out.forced_admission = false;
            self.settle(&BatchPlan::new(), reqs);
            return out;
        }

        let predicted = self.coeffs.predict(&b.shape);
        b.plan.predicted_latency = predicted;
        self.settle(&b.plan, reqs);
        out.evictions = b.evictions;
        out.plan = b.plan;
        if !out.plan.is_empty() {
            self.running_batch = Some(out.plan.clone());
        }
        out
    }

    /// Whether `r` may start prefilling: every admitted online request must
    /// still be able to run to completion on free pages plus whatever offline
    /// requests hold.
    fn online_fits(&self, reqs: &[Request], kv: &KvManager, r: &Request) -> bool {
        if kv.tracks(r.id) {
            return true;
        }
        let mut admitted = false;
        let outstanding: u32 = self
            .online_decoding
            .iter()
            .chain(&self.online_queue)
            .filter(|&&id| kv.tracks(id))
            .map(|&id| {
                admitted = true;
                pages_for(reqs[id.index()].lifetime_tokens()).saturating_sub(kv.gpu_pages_of(id))
            })
            .sum();
        if !admitted {
            return true;
        }
        let offline: u32 = self
            .running_offline
            .iter()
            .chain(&self.paused_offline)
            .map(|&id| kv.releasable_pages(id))
            .sum();
        outstanding + pages_for(r.lifetime_tokens()) <= kv.gpu_free_pages() + offline
    }

    /// Makes room for `tokens` more KV tokens of an online request.
    fn ensure_pages(
        &mut self,
        b: &mut Builder,
        kv: &mut KvManager,
        r: &Request,
        tokens: u32,
        evict: bool,
        now: SimTime,
    ) -> bool {
        let need = kv.growth_pages(r.id, tokens);
        let avail = kv.available_for(r.id);
        if need <= avail {
            return true;
        }
        if evict {
            self.release_into(b, kv, need - avail, now);
        }
        kv.growth_pages(r.id, tokens) <= kv.available_for(r.id)
    }

    fn mark_started(&mut self, id: RequestId) {
        if !self.started.contains_key(&id) {
            self.started.insert(id, self.next_start);
            self.next_start += 1;
        }
    }

    /// Updates queues and states once the plan is final.
    fn settle(&mut self, plan: &BatchPlan, reqs: &mut [Request]) {
        let previous = std::mem::take(&mut self.running_offline);
        let in_plan: Vec<RequestId> = plan
            .entries
            .iter()
            .filter(|e| e.class == RequestClass::Offline)
            .map(|e| e.request)
            .collect();
        self.paused_offline.retain(|id| !in_plan.contains(id));
        self.offline_queue.retain(|id| !in_plan.contains(id));
        let mut newly_paused: Vec<RequestId> = previous
            .into_iter()
            .filter(|id| !in_plan.contains(id))
            .collect();
        for &id in &newly_paused {
            reqs[id.index()].state = RequestState::Paused;
        }
        newly_paused.append(&mut self.paused_offline);
        self.paused_offline = newly_paused;
        for &id in &in_plan {
            self.mark_started(id);
        }
        for e in &plan.entries {
            reqs[e.request.index()].state = RequestState::Running;
        }
        self.running_offline = in_plan;
    }

    fn offer(&mut self, b: &mut Builder, kv: &mut KvManager, r: &Request, budgeted: bool) -> Offer {
        let (kind, want) = if r.in_decode() {
            (EntryKind::Decode, 1)
        } else {
            (EntryKind::Prefill, r.remaining_prefill())
        };
        let p = if budgeted {
            can_schedule(
                &self.coeffs,
                &b.shape,
                Candidate {
                    remaining: want,
                    context: r.context_len(),
                },
                self.budget_ms,
                b.room(),
            )
        } else {
            want.min(b.room())
        };
        if p == 0 {
            return Offer::Exhausted;
        }
        let fit = fit_tokens(kv, r, kind, p);
        if fit == 0 {
            return Offer::NoMemory;
        }
        kv.allocate(r.id, r.class, kv_growth(r, kind, fit))
            .expect("checked");
        b.push(r, kind, fit, r.context_len());
        Offer::Added
    }

    /// Brings a non-resident paused request closer to running: prefetches its
    /// host pages or schedules recomputation of discarded ones.
    fn restore(
        &mut self,
        b: &mut Builder,
        kv: &mut KvManager,
        r: &Request,
        budgeted: bool,
        now: SimTime,
    ) -> Offer {
        let needs = kv.restore_needs(r.id);
        if needs.host_pages > 0 {
            let swap = self.features.kv_mode == KvMode::Swap;
            let headroom = if swap {
                0
            } else {
                self.prefetch_headroom_pages
            };
            if kv.gpu_free_pages() >= needs.host_pages + headroom {
                if let Some((_, done)) = kv.prefetch(r.id, needs.host_pages, swap, now) {
                    if swap {
                        b.stall_until = Some(b.stall_until.map_or(done, |t: SimTime| t.max(done)));
                    }
                }
                return Offer::Waiting;
            }
            return Offer::NoMemory;
        }
        if needs.prefetching_pages > 0 || needs.draining_pages > 0 {
            return Offer::Waiting;
        }
        if needs.discarded_tokens == 0 {
            return self.offer(b, kv, r, budgeted);
        }
        let context = kv.tokens(r.id) - needs.discarded_tokens;
        let mut p = if budgeted {
            can_schedule(
                &self.coeffs,
                &b.shape,
                Candidate {
                    remaining: needs.discarded_tokens,
                    context,
                },
                self.budget_ms,
                b.room(),
            )
        } else {
            needs.discarded_tokens.min(b.room())
        };
        if p < needs.discarded_tokens {
            p -= p % PAGE_TOKENS;
        }
        if p == 0 {
            return Offer::Exhausted;
        }
        match kv.allocate_restore(r.id, p) {
            Ok(covered) => {
                b.push(r, EntryKind::Recompute, covered, context);
                Offer::Added
            }
            Err(_) => Offer::NoMemory,
        }
    }

    fn conserve_offline(
        &mut self,
        b: &mut Builder,
        reqs: &mut [Request],
        kv: &mut KvManager,
        now: SimTime,
    ) {
        if !self.has_online_work() {
            return self.offline_optimized(b, reqs, kv, now);
        }
        let mut resident = self.running_offline.clone();
        let mut elsewhere = Vec::new();
        for &id in &self.paused_offline {
            if kv.is_resident(id) {
                resident.push(id);
            } else {
                elsewhere.push(id);
            }
        }
        for id in resident {
            if !kv.is_resident(id) {
                elsewhere.push(id);
                continue;
            }
            match self.offer(b, kv, &reqs[id.index()], true) {
                Offer::Exhausted => return,
                Offer::Added | Offer::NoMemory | Offer::Waiting => {}
            }
        }
        let mut awaiting = false;
        for id in elsewhere {
            match self.restore(b, kv, &reqs[id.index()], true, now) {
                Offer::Exhausted => return,
                Offer::Added => {}
                Offer::NoMemory | Offer::Waiting => awaiting = true,
            }
            if b.stall_until.is_some() {
                return;
            }
        }
        if awaiting {
            return;
        }
        while let Some(&id) = self.offline_queue.front() {
            match self.offer(b, kv, &reqs[id.index()], true) {
                Offer::Added => {
                    self.offline_queue.pop_front();
                }
                _ => break,
            }
        }
    }

    /// No online work in the system: every offline decode plus one prefill
    /// sized for peak throughput.
    fn offline_optimized(
        &mut self,
        b: &mut Builder,
        reqs: &mut [Request],
        kv: &mut KvManager,
        now: SimTime,
    ) {
        let started: Vec<RequestId> = self
            .running_offline
            .iter()
            .chain(&self.paused_offline)
            .copied()
            .collect();
        let mut prefill: Option<RequestId> = None;
        for &id in &started {
            let r = &reqs[id.index()];
            if !kv.is_resident(id) {
                let _ = self.restore(b, kv, r, false, now);
                if b.stall_until.is_some() {
                    return;
                }
                continue;
            }
            if r.in_decode() {
                if b.room() > 0 && fit_tokens(kv, r, EntryKind::Decode, 1) == 1 {
                    kv.allocate(id, r.class, 1).expect("checked");
                    b.push(r, EntryKind::Decode, 1, r.context_len());
                }
            } else if prefill.is_none() {
                prefill = Some(id);
            }
        }
        let id = match prefill {
            Some(id) => id,
            None => match self.offline_queue.front() {
                Some(&id) => id,
                None => return,
            },
        };
        let r = &reqs[id.index()];
        let cap = r.remaining_prefill().min(b.room());
        if cap == 0 {
            return;
        }
        let p = max_throughput_tokens(&self.coeffs, r.context_len(), cap);
        let fit = fit_tokens(kv, r, EntryKind::Prefill, p);
        if fit == 0 {
            return;
        }
        kv.allocate(id, r.class, kv_growth(r, EntryKind::Prefill, fit))
            .expect("checked");
        b.push(r, EntryKind::Prefill, fit, r.context_len());
        if prefill.is_none() {
            self.offline_queue.pop_front();
        }
    }

    /// Fixed-chunk offline fill: started requests oldest first, then new ones.
    fn chunked_offline(
        &mut self,
        b: &mut Builder,
        reqs: &mut [Request],
        kv: &mut KvManager,
        admit_new: bool,
        now: SimTime,
    ) {
        let non_preemptive = matches!(self.policy, SchedulerPolicy::NonPreemptive { .. });
        let mut started: Vec<RequestId> = self
            .running_offline
            .iter()
            .chain(&self.paused_offline)
            .copied()
            .collect();
        started.sort_by_key(|id| self.started.get(id).copied().unwrap_or(u64::MAX));
        for id in started {
            if b.room() == 0 {
                return;
            }
            let r = &reqs[id.index()];
            if !kv.is_resident(id) {
                let needs = kv.restore_needs(id);
                if needs.discarded_tokens > 0 && needs.host_pages == 0 && !non_preemptive {
                    let want = needs.discarded_tokens.min(b.room());
                    let pages = want.div_ceil(PAGE_TOKENS);
                    if pages > kv.available_for(id) {
                        let short = pages - kv.available_for(id);
                        self.evict_newer(b, kv, id, short, now);
                    }
                }
                let r = &reqs[id.index()];
                let _ = self.restore(b, kv, r, false, now);
                if b.stall_until.is_some() {
                    return;
                }
                continue;
            }
            let need = if r.in_decode() {
                1
            } else {
                kv_growth(r, EntryKind::Prefill, r.remaining_prefill().min(b.room()))
            };
            let pages = kv.growth_pages(id, need);
            if pages > kv.available_for(id) && !non_preemptive {
                let short = pages - kv.available_for(id);
                self.evict_newer(b, kv, id, short, now);
                if b.stall_until.is_some() {
                    return;
                }
            }
            let r = &reqs[id.index()];
            let _ = self.offer(b, kv, r, false);
        }
        while admit_new && b.room() > 0 {
            let Some(&id) = self.offline_queue.front() else {
                break;
            };
            let r = &reqs[id.index()];
            if non_preemptive
                && kv
                    .reserve_lifetime(id, r.class, r.lifetime_tokens())
                    .is_err()
            {
                break;
            }
            match self.offer(b, kv, r, false) {
                Offer::Added => {
                    self.offline_queue.pop_front();
                }
                _ => {
                    if non_preemptive {
                        kv.free_request(id);
                    }
                    break;
                }
            }
        }
    }

    /// Request-granular eviction of offline requests started after `id`.
    fn evict_newer(
        &mut self,
        b: &mut Builder,
        kv: &mut KvManager,
        id: RequestId,
        pages: u32,
        now: SimTime,
    ) {
        let me = self.started.get(&id).copied().unwrap_or(u64::MAX);
        let mut freed = 0;
        for victim in self.eviction_victims(&b.plan) {
            if freed >= pages {
                break;
            }
            if victim == id || self.started.get(&victim).copied().unwrap_or(0) < me {
                continue;
            }
            if kv.releasable_pages(victim) == 0 {
                continue;
            }
            let ev = kv
                .evict_request(victim, self.features.kv_mode, now)
                .expect("victims are offline");
            freed += ev.freed_now;
            if let Some(done) = ev.swap_done {
                b.stall_until = Some(b.stall_until.map_or(done, |t: SimTime| t.max(done)));
                freed += ev.freed_later;
            }
            b.evictions.push((victim, ev));
        }
    }

    /// Offline entries dropped mid-iteration: their reservations are returned
    /// and they rejoin the paused set.
    pub fn on_preempted(
        &mut self,
        dropped: &[RequestId],
        reqs: &mut [Request],
        kv: &mut KvManager,
    ) {
        for &id in dropped {
            kv.rollback(id);
            reqs[id.index()].state = RequestState::Paused;
        }
        self.running_offline.retain(|id| !dropped.contains(id));
        let mut front: Vec<RequestId> = dropped.to_vec();
        front.append(&mut self.paused_offline);
        self.paused_offline = front;
        if let Some(plan) = self.running_batch.as_mut() {
            *plan = plan.retain_class(RequestClass::Online);
        }
    }

    /// Commits the progress of the finished iteration's (possibly residual)
    /// plan at `now`.
    pub fn on_iteration_end(
        &mut self,
        plan: &BatchPlan,
        reqs: &mut [Request],
        kv: &mut KvManager,
        now: SimTime,
    ) -> IterationCommit {
        let mut c = IterationCommit::default();
        for e in &plan.entries {
            let id = e.request;
            let r = &mut reqs[id.index()];
            let grown: u64;
            let progress = match e.kind {
                EntryKind::Prefill => {
                    let growth = kv_growth(r, EntryKind::Prefill, e.compute_tokens);
                    kv.commit_growth(id, growth);
                    r.commit_prefill(e.compute_tokens, now);
                    grown = growth as u64;
                    growth
                }
                EntryKind::Decode => {
                    kv.commit_growth(id, 1);
                    r.commit_decode(now);
                    grown = 1;
                    1
                }
                EntryKind::Recompute => {
                    let restored = kv.commit_restore(id, e.compute_tokens);
                    c.recomputed_tokens += restored as u64;
                    grown = restored as u64;
                    0
                }
            };
            c.new_kv_tokens += grown;
            c.progress_tokens += progress as u64;
            if r.class == RequestClass::Offline {
                c.offline_progress_tokens += progress as u64;
            }
            if r.class == RequestClass::Online && r.prefill_done == r.input_tokens {
                if let Some(pos) = self.online_queue.iter().position(|&q| q == id) {
                    self.online_queue.remove(pos);
                    if !r.is_finished() {
                        self.online_decoding.push(id);
                    }
                }
            }
            if r.is_finished() {
                kv.free_request(id);
                self.online_decoding.retain(|&q| q != id);
                self.running_offline.retain(|&q| q != id);
                self.paused_offline.retain(|&q| q != id);
                self.started.remove(&id);
                c.completed.push(id);
            } else {
                c.live_new_kv_tokens += grown;
                c.touched.push(id);
            }
        }
        self.running_batch = None;
        c
    }
}

//! Page-granular KV state for every request, with host checkpoints and
//! bandwidth-limited transfer channels.
//!
//! A request's KV covers tokens `[0, context_len)` in pages of
//! [`PAGE_TOKENS`] tokens. Each page may have a GPU copy, a host copy, both,
//! or neither (discarded, to be recomputed). Transfers are modeled as FIFO
//! jobs on two independent channels; they never block compute, their
//! completion is reported back through [`KvManager::complete_transfer`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;
use crate::types::{ClusterConfig, RequestClass, RequestId, PAGE_TOKENS};

/// How preempted offline KV is handled when its GPU memory is reclaimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Checkpoint new tokens every iteration, drop GPU copies page by page,
    /// prefetch them back in the background.
    #[default]
    Incremental,
    /// Drop the whole request and rebuild it by re-prefilling.
    Recompute,
    /// Copy the whole request out and back, stalling scheduling meanwhile.
    Swap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PageLocation {
    GpuOnly,
    HostOnly,
    Both,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvPage {
    /// First token index within the request.
    pub start: u32,
    pub tokens: u32,
    on_gpu: bool,
    /// GPU slot held for an in-flight prefetch.
    prefetching: bool,
    host_slot: bool,
    /// Tokens whose host copy is complete.
    host_tokens: u32,
    /// Tokens covered by completed or in-flight checkpoints.
    ckpt_target: u32,
    inflight: u32,
    drop_pending: bool,
    pub recompute_on_evict: bool,
}

impl KvPage {
    fn new(start: u32) -> Self {
        KvPage {
            start,
            tokens: 0,
            on_gpu: true,
            prefetching: false,
            host_slot: false,
            host_tokens: 0,
            ckpt_target: 0,
            inflight: 0,
            drop_pending: false,
            recompute_on_evict: false,
        }
    }

    fn host_valid(&self) -> bool {
        self.host_slot && self.host_tokens == self.tokens
    }

    pub fn location(&self) -> PageLocation {
        match (self.on_gpu, self.host_valid()) {
            (true, true) => PageLocation::Both,
            (true, false) => PageLocation::GpuOnly,
            (false, true) => PageLocation::HostOnly,
            (false, false) => PageLocation::Discarded,
        }
    }

    pub fn token_range(&self) -> std::ops::Range<u32> {
        self.start..self.start + self.tokens
    }

    /// GPU copy present or arriving.
    fn holds_gpu_slot(&self) -> bool {
        self.on_gpu || self.prefetching
    }
}

#[derive(Debug, Clone)]
struct RequestKv {
    class: RequestClass,
    pages: Vec<KvPage>,
    /// GPU pages reserved for the running iteration.
    pending: u32,
    /// Part of `pending` drawn from `lifetime`.
    pending_lifetime: u32,
    /// GPU pages held back for this request's future growth.
    lifetime: u32,
}

impl RequestKv {
    fn tokens(&self) -> u32 {
        self.pages.iter().map(|p| p.tokens).sum()
    }

    fn gpu_slots(&self) -> u32 {
        self.pages.iter().filter(|p| p.holds_gpu_slot()).count() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    D2h,
    H2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Checkpoint,
    Prefetch,
    SwapOut,
    SwapIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PageRef {
    request: RequestId,
    page: u32,
    upto: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferJob {
    pub id: u64,
    pub direction: Direction,
    pub kind: JobKind,
    pub bytes: u64,
    pub enqueued: SimTime,
    pub start: SimTime,
    pub done: SimTime,
    #[serde(skip)]
    pages: Vec<PageRef>,
}

/// FIFO bandwidth-limited link.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferChannel {
    pub direction: Direction,
    /// Bytes per second.
    pub bandwidth: f64,
    pub busy_until: SimTime,
}

impl TransferChannel {
    pub fn new(direction: Direction, bandwidth: f64) -> Self {
        TransferChannel {
            direction,
            bandwidth,
            busy_until: SimTime::ZERO,
        }
    }

    /// Time `bytes` occupy the link.
    pub fn transfer_time(&self, bytes: u64) -> SimTime {
        SimTime::from_secs_f64(bytes as f64 / self.bandwidth)
    }

    /// Books a job enqueued at `now`; returns (start, completion).
    pub fn book(&mut self, now: SimTime, bytes: u64, setup: SimTime) -> (SimTime, SimTime) {
        let start = now.max(self.busy_until);
        let done = start + setup + self.transfer_time(bytes);
        self.busy_until = done;
        (start, done)
    }
}

/// Outcome of reclaiming a paused offline request's GPU pages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Eviction {
    /// Pages returned to the free pool at `now`.
    pub freed_now: u32,
    /// Pages returned when their in-flight transfer completes.
    pub freed_later: u32,
    /// Tokens that must be recomputed before the owner can resume.
    pub penalty_tokens: u32,
    /// Swap-out completion, for request-granular swaps.
    pub swap_done: Option<SimTime>,
    pub job: Option<u64>,
}

impl Eviction {
    pub fn freed(&self) -> u32 {
        self.freed_now + self.freed_later
    }
}

/// Not enough free GPU pages; `0` is the number missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortfall(pub u32);

/// What a non-resident request needs before it can run again.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RestoreNeeds {
    pub host_pages: u32,
    pub prefetching_pages: u32,
    pub discarded_pages: u32,
    pub discarded_tokens: u32,
    pub draining_pages: u32,
}

impl RestoreNeeds {
    pub fn is_resident(&self) -> bool {
        self.host_pages == 0
            && self.prefetching_pages == 0
            && self.discarded_pages == 0
            && self.draining_pages == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PageRangeView {
    pub start: u32,
    pub end: u32,
    pub location: PageLocation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TransferStats {
    pub d2h_bytes: u64,
    pub h2d_bytes: u64,
    pub jobs: u64,
}

pub fn pages_for(tokens: u32) -> u32 {
    tokens.div_ceil(PAGE_TOKENS)
}

#[derive(Debug, Clone)]
pub struct KvManager {
    kv_bytes_per_token: u64,
    gpu_total: u32,
    host_total: u32,
    gpu_free: u32,
    host_used: u32,
    gather: SimTime,
    requests: BTreeMap<RequestId, RequestKv>,
    d2h: TransferChannel,
    h2d: TransferChannel,
    jobs: BTreeMap<u64, TransferJob>,
    next_job: u64,
    /// Offline pages with both copies, oldest checkpoint first.
    host_lru: BTreeSet<(u64, RequestId, u32)>,
    lru_clock: u64,
    stats: TransferStats,
    new_jobs: Vec<(u64, SimTime)>,
}

impl KvManager {
    pub fn new(cluster: &ClusterConfig) -> Self {
        KvManager {
            kv_bytes_per_token: cluster.kv_bytes_per_token,
            gpu_total: cluster.gpu_pages(),
            host_total: cluster.host_pages(),
            gpu_free: cluster.gpu_pages(),
            host_used: 0,
            gather: SimTime::from_secs_f64(cluster.gather_latency),
            requests: BTreeMap::new(),
            d2h: TransferChannel::new(Direction::D2h, cluster.d2h_bandwidth),
            h2d: TransferChannel::new(Direction::H2d, cluster.h2d_bandwidth),
            jobs: BTreeMap::new(),
            next_job: 0,
            host_lru: BTreeSet::new(),
            lru_clock: 0,
            stats: TransferStats::default(),
            new_jobs: Vec::new(),
        }
    }

    pub fn gpu_total_pages(&self) -> u32 {
        self.gpu_total
    }

    pub fn gpu_free_pages(&self) -> u32 {
        self.gpu_free
    }

    pub fn host_total_pages(&self) -> u32 {
        self.host_total
    }

    pub fn host_used_pages(&self) -> u32 {
        self.host_used
    }

    pub fn stats(&self) -> TransferStats {
        self.stats
    }

    pub fn bytes_for(&self, tokens: u32) -> u64 {
        tokens as u64 * self.kv_bytes_per_token
    }

    pub fn d2h_channel(&self) -> &TransferChannel {
        &self.d2h
    }

    pub fn h2d_channel(&self) -> &TransferChannel {
        &self.h2d
    }

    pub fn job(&self, id: u64) -> Option<&TransferJob> {
        self.jobs.get(&id)
    }

    pub fn inflight_jobs(&self) -> impl Iterator<Item = &TransferJob> {
        self.jobs.values()
    }

    /// Jobs enqueued since the last call, with their completion times.
    pub fn take_new_jobs(&mut self) -> Vec<(u64, SimTime)> {
        std::mem::take(&mut self.new_jobs)
    }

    pub fn tracks(&self, id: RequestId) -> bool {
        self.requests.contains_key(&id)
    }

    fn entry(&mut self, id: RequestId, class: RequestClass) -> &mut RequestKv {
        self.requests.entry(id).or_insert_with(|| RequestKv {
            class,
            pages: Vec::new(),
            pending: 0,
            pending_lifetime: 0,
            lifetime: 0,
        })
    }

    /// Tokens of KV currently tracked for `id`, in any location.
    pub fn tokens(&self, id: RequestId) -> u32 {
        self.requests.get(&id).map_or(0, |r| r.tokens())
    }

    pub fn pages(&self, id: RequestId) -> &[KvPage] {
        self.requests.get(&id).map_or(&[], |r| r.pages.as_slice())
    }

    /// GPU pages `id` occupies or has reserved.
    pub fn gpu_pages_of(&self, id: RequestId) -> u32 {
        self.requests
            .get(&id)
            .map_or(0, |r| r.gpu_slots() + r.pending + r.lifetime)
    }

    /// Additional pages needed to append `n` tokens to `id`.
    pub fn growth_pages(&self, id: RequestId, n: u32) -> u32 {
        let (tokens, pages) = self
            .requests
            .get(&id)
            .map_or((0, 0), |r| (r.tokens(), r.pages.len() as u32));
        pages_for(tokens + n).saturating_sub(pages)
    }

    /// Pages available to `id` right now: its lifetime reservation plus the
    /// free pool.
    pub fn available_for(&self, id: RequestId) -> u32 {
        self.gpu_free + self.requests.get(&id).map_or(0, |r| r.lifetime)
    }

    /// Reserves GPU pages for appending `n_tokens` to `id` when the running
    /// iteration commits.
    pub fn allocate(
        &mut self,
        id: RequestId,
        class: RequestClass,
        n_tokens: u32,
    ) -> std::result::Result<u32, Shortfall> {
        let need = self.growth_pages(id, n_tokens);
        let lifetime = self.requests.get(&id).map_or(0, |r| r.lifetime);
        let from_lifetime = need.min(lifetime);
        let from_free = need - from_lifetime;
        if from_free > self.gpu_free {
            return Err(Shortfall(from_free - self.gpu_free));
        }
        self.gpu_free -= from_free;
        let r = self.entry(id, class);
        r.lifetime -= from_lifetime;
        r.pending += need;
        r.pending_lifetime += from_lifetime;
        Ok(need)
    }

    /// Holds back enough pages for `id` to reach `lifetime_tokens` without
    /// ever needing eviction.
    pub fn reserve_lifetime(
        &mut self,
        id: RequestId,
        class: RequestClass,
        lifetime_tokens: u32,
    ) -> std::result::Result<u32, Shortfall> {
        let have = self
            .requests
            .get(&id)
            .map_or(0, |r| r.pages.len() as u32 + r.pending + r.lifetime);
        let need = pages_for(lifetime_tokens).saturating_sub(have);
        if need > self.gpu_free {
            return Err(Shortfall(need - self.gpu_free));
        }
        self.gpu_free -= need;
        self.entry(id, class).lifetime += need;
        Ok(need)
    }

    /// Appends `n` tokens to `id`, consuming its pending reservation.
    pub fn commit_growth(&mut self, id: RequestId, n: u32) {
        let Some(r) = self.requests.get_mut(&id) else {
            debug_assert!(n == 0);
            return;
        };
        let mut left = n;
        if let Some(last) = r.pages.last_mut() {
            let room = PAGE_TOKENS - last.tokens;
            let take = room.min(left);
            debug_assert!(take == 0 || last.on_gpu);
            last.tokens += take;
            left -= take;
        }
        while left > 0 {
            let start = r.pages.last().map_or(0, |p| p.start + p.tokens);
            let mut page = KvPage::new(start);
            page.tokens = left.min(PAGE_TOKENS);
            left -= page.tokens;
            r.pages.push(page);
            debug_assert!(r.pending > 0);
            r.pending -= 1;
            r.pending_lifetime = r.pending_lifetime.min(r.pending);
        }
    }

    /// Restores up to `tokens` discarded tokens of `id` after recomputation,
    /// consuming its pending reservation. Returns tokens restored.
    pub fn commit_restore(&mut self, id: RequestId, tokens: u32) -> u32 {
        let Some(r) = self.requests.get_mut(&id) else {
            return 0;
        };
        let mut restored = 0;
        for p in r.pages.iter_mut() {
            if restored >= tokens {
                break;
            }
            if p.location() == PageLocation::Discarded && !p.prefetching {
                p.on_gpu = true;
                p.recompute_on_evict = false;
                p.host_tokens = 0;
                p.ckpt_target = 0;
                restored += p.tokens;
                debug_assert!(r.pending > 0);
                r.pending -= 1;
                r.pending_lifetime = r.pending_lifetime.min(r.pending);
            }
        }
        restored
    }

    /// Reserves GPU pages for recomputing the next `tokens` discarded tokens.
    /// Returns the discarded tokens those pages cover.
    pub fn allocate_restore(
        &mut self,
        id: RequestId,
        tokens: u32,
    ) -> std::result::Result<u32, Shortfall> {
        let Some(r) = self.requests.get(&id) else {
            return Ok(0);
        };
        let mut pages = 0;
        let mut covered = 0;
        for p in r
            .pages
            .iter()
            .filter(|p| p.location() == PageLocation::Discarded && !p.prefetching)
        {
            if covered >= tokens {
                break;
            }
            pages += 1;
            covered += p.tokens;
        }
        let lifetime = r.lifetime;
        let from_lifetime = pages.min(lifetime);
        let from_free = pages - from_lifetime;
        if from_free > self.gpu_free {
            return Err(Shortfall(from_free - self.gpu_free));
        }
        self.gpu_free -= from_free;
        let r = self.requests.get_mut(&id).expect("tracked");
        r.lifetime -= from_lifetime;
        r.pending += pages;
        r.pending_lifetime += from_lifetime;
        Ok(covered)
    }

    /// Returns the pending reservation of `id` (its iteration work was dropped).
    pub fn rollback(&mut self, id: RequestId) {
        if let Some(r) = self.requests.get_mut(&id) {
            self.gpu_free += r.pending - r.pending_lifetime;
            r.lifetime += r.pending_lifetime;
            r.pending = 0;
            r.pending_lifetime = 0;
        }
    }

    /// Releases everything `id` holds.
    pub fn free_request(&mut self, id: RequestId) {
        if let Some(r) = self.requests.remove(&id) {
            self.gpu_free += r.gpu_slots() + r.pending + r.lifetime;
            self.host_used -= r.pages.iter().filter(|p| p.host_slot).count() as u32;
        }
    }

    pub fn restore_needs(&self, id: RequestId) -> RestoreNeeds {
        let mut n = RestoreNeeds::default();
        for p in self.pages(id) {
            if p.prefetching {
                n.prefetching_pages += 1;
            } else if p.drop_pending {
                n.draining_pages += 1;
            } else {
                match p.location() {
                    PageLocation::HostOnly => n.host_pages += 1,
                    PageLocation::Discarded => {
                        n.discarded_pages += 1;
                        n.discarded_tokens += p.tokens;
                    }
                    _ => {}
                }
            }
        }
        n
    }

    /// Every page covering the request's context is on the GPU.
    pub fn is_resident(&self, id: RequestId) -> bool {
        self.pages(id).iter().all(|p| p.on_gpu && !p.drop_pending)
    }

    fn take_host_slot(&mut self) -> bool {
        if self.host_used < self.host_total {
            self.host_used += 1;
            return true;
        }
        // Reuse the host copy of the oldest-checkpointed offline page still on GPU.
        while let Some(&(order, id, idx)) = self.host_lru.iter().next() {
            self.host_lru.remove(&(order, id, idx));
            let Some(r) = self.requests.get_mut(&id) else {
                continue;
            };
            let Some(p) = r.pages.get_mut(idx as usize) else {
                continue;
            };
            if p.location() == PageLocation::Both && p.inflight == 0 && !p.prefetching {
                p.host_slot = false;
                p.host_tokens = 0;
                p.ckpt_target = 0;
                p.recompute_on_evict = true;
                return true;
            }
        }
        false
    }

    fn push_job(
        &mut self,
        direction: Direction,
        kind: JobKind,
        bytes: u64,
        pages: Vec<PageRef>,
        now: SimTime,
    ) -> (u64, SimTime) {
        let setup = match kind {
            JobKind::Checkpoint | JobKind::Prefetch => self.gather,
            JobKind::SwapOut | JobKind::SwapIn => SimTime::ZERO,
        };
        let channel = match direction {
            Direction::D2h => &mut self.d2h,
            Direction::H2d => &mut self.h2d,
        };
        let (start, done) = channel.book(now, bytes, setup);
        let id = self.next_job;
        self.next_job += 1;
        match direction {
            Direction::D2h => self.stats.d2h_bytes += bytes,
            Direction::H2d => self.stats.h2d_bytes += bytes,
        }
        self.stats.jobs += 1;
        self.new_jobs.push((id, done));
        self.jobs.insert(
            id,
            TransferJob {
                id,
                direction,
                kind,
                bytes,
                enqueued: now,
                start,
                done,
                pages,
            },
        );
        (id, done)
    }

    /// Enqueues one D2H job covering every not-yet-checkpointed token of the
    /// given requests. Pages that cannot get a host slot are tagged for
    /// recomputation instead. Returns the job and its completion time.
    pub fn checkpoint_incremental(
        &mut self,
        ids: &[RequestId],
        now: SimTime,
    ) -> Option<(u64, SimTime)> {
        let mut refs = Vec::new();
        let mut tokens = 0u64;
        for &id in ids {
            let n_pages = self.pages(id).len();
            for idx in 0..n_pages {
                let (needs_slot, pending) = {
                    let p = &self.requests[&id].pages[idx];
                    if !p.on_gpu || p.ckpt_target >= p.tokens || p.recompute_on_evict {
                        continue;
                    }
                    (!p.host_slot, p.tokens - p.ckpt_target)
                };
                if needs_slot && !self.take_host_slot() {
                    self.requests.get_mut(&id).expect("tracked").pages[idx].recompute_on_evict =
                        true;
                    continue;
                }
                let p = &mut self.requests.get_mut(&id).expect("tracked").pages[idx];
                p.host_slot = true;
                p.ckpt_target = p.tokens;
                p.inflight += 1;
                tokens += pending as u64;
                refs.push(PageRef {
                    request: id,
                    page: idx as u32,
                    upto: p.tokens,
                });
            }
        }
        if refs.is_empty() {
            return None;
        }
        let bytes = tokens * self.kv_bytes_per_token;
        Some(self.push_job(Direction::D2h, JobKind::Checkpoint, bytes, refs, now))
    }

    fn check_offline(&self, id: RequestId) -> Result<()> {
        match self.requests.get(&id) {
            Some(r) if r.class == RequestClass::Online => Err(Error::OnlineNotEvictable(id)),
            _ => Ok(()),
        }
    }

    /// Page-granular reclaim of up to `max_pages` GPU pages from a paused
    /// offline request. Pages with a host copy go first and free instantly;
    /// pages still being checkpointed free when their transfer lands; the
    /// rest are discarded and must be recomputed.
    pub fn evict_offline_pages(
        &mut self,
        id: RequestId,
        max_pages: u32,
        _now: SimTime,
    ) -> Result<Eviction> {
        self.check_offline(id)?;
        let mut ev = Eviction::default();
        let Some(r) = self.requests.get_mut(&id) else {
            return Ok(ev);
        };
        let mut freed_host = 0;
        for pass in 0..3 {
            for p in r.pages.iter_mut().rev() {
                if ev.freed() >= max_pages {
                    break;
                }
                if !p.on_gpu || p.drop_pending {
                    continue;
                }
                match pass {
                    0 if p.location() == PageLocation::Both && p.inflight == 0 => {
                        p.on_gpu = false;
                        ev.freed_now += 1;
                    }
                    1 if p.inflight > 0 && p.ckpt_target == p.tokens => {
                        p.drop_pending = true;
                        ev.freed_later += 1;
                    }
                    2 if p.inflight == 0 => {
                        p.on_gpu = false;
                        p.recompute_on_evict = false;
                        if p.host_slot {
                            p.host_slot = false;
                            p.host_tokens = 0;
                            p.ckpt_target = 0;
                            freed_host += 1;
                        }
                        ev.freed_now += 1;
                        ev.penalty_tokens += p.tokens;
                    }
                    _ => {}
                }
            }
        }
        // Drop the lifetime reservation too; it is re-acquired on resume.
        ev.freed_now += r.lifetime;
        self.gpu_free += ev.freed_now;
        r.lifetime = 0;
        self.host_used -= freed_host;
        Ok(ev)
    }

    /// GPU pages of `id` that [`Self::evict_offline_pages`] could release.
    pub fn releasable_pages(&self, id: RequestId) -> u32 {
        match self.requests.get(&id) {
            Some(r) if r.class == RequestClass::Offline => {
                r.pages
                    .iter()
                    .filter(|p| p.on_gpu && !p.drop_pending)
                    .count() as u32
                    + r.lifetime
            }
            _ => 0,
        }
    }

    /// Request-granular reclaim. `Recompute` discards every GPU page without a
    /// host copy; `Swap` copies them out in one job and frees them when it
    /// completes.
    pub fn evict_request(&mut self, id: RequestId, mode: KvMode, now: SimTime) -> Result<Eviction> {
        self.check_offline(id)?;
        if mode == KvMode::Incremental {
            return self.evict_offline_pages(id, u32::MAX, now);
        }
        let mut ev = Eviction::default();
        let Some(r) = self.requests.get(&id) else {
            return Ok(ev);
        };
        let n = r.pages.len();
        let mut refs = Vec::new();
        let mut tokens = 0u64;
        for idx in 0..n {
            let p = &self.requests[&id].pages[idx];
            if !p.on_gpu || p.drop_pending {
                continue;
            }
            if p.location() == PageLocation::Both && p.inflight == 0 {
                self.requests.get_mut(&id).expect("tracked").pages[idx].on_gpu = false;
                ev.freed_now += 1;
                continue;
            }
            if p.inflight > 0 && p.ckpt_target == p.tokens {
                self.requests.get_mut(&id).expect("tracked").pages[idx].drop_pending = true;
                ev.freed_later += 1;
                continue;
            }
            let swap = mode == KvMode::Swap && (p.host_slot || self.take_host_slot());
            let p = &mut self.requests.get_mut(&id).expect("tracked").pages[idx];
            if swap {
                tokens += (p.tokens - p.ckpt_target.min(p.tokens)) as u64;
                p.host_slot = true;
                p.ckpt_target = p.tokens;
                p.inflight += 1;
                p.drop_pending = true;
                refs.push(PageRef {
                    request: id,
                    page: idx as u32,
                    upto: p.tokens,
                });
                ev.freed_later += 1;
            } else {
                p.on_gpu = false;
                p.recompute_on_evict = false;
                if p.host_slot {
                    p.host_slot = false;
                    p.host_tokens = 0;
                    p.ckpt_target = 0;
                    self.host_used -= 1;
                }
                ev.freed_now += 1;
                ev.penalty_tokens += p.tokens;
            }
        }
        let r = self.requests.get_mut(&id).expect("tracked");
        ev.freed_now += r.lifetime;
        self.gpu_free += ev.freed_now;
        r.lifetime = 0;
        if !refs.is_empty() {
            let bytes = tokens * self.kv_bytes_per_token;
            let (job, done) = self.push_job(Direction::D2h, JobKind::SwapOut, bytes, refs, now);
            ev.job = Some(job);
            ev.swap_done = Some(done);
        }
        Ok(ev)
    }

    /// Starts copying host-only pages of `id` back to the GPU, at most
    /// `max_pages` of them. Returns the job, or `None` when nothing was
    /// enqueued.
    pub fn prefetch(
        &mut self,
        id: RequestId,
        max_pages: u32,
        swap: bool,
        now: SimTime,
    ) -> Option<(u64, SimTime)> {
        let budget = max_pages.min(self.gpu_free);
        let r = self.requests.get_mut(&id)?;
        let mut refs = Vec::new();
        let mut tokens = 0u64;
        for (idx, p) in r.pages.iter_mut().enumerate() {
            if refs.len() as u32 >= budget {
                break;
            }
            if p.location() == PageLocation::HostOnly && !p.prefetching && !p.drop_pending {
                p.prefetching = true;
                tokens += p.tokens as u64;
                refs.push(PageRef {
                    request: id,
                    page: idx as u32,
                    upto: p.tokens,
                });
            }
        }
        if refs.is_empty() {
            return None;
        }
        self.gpu_free -= refs.len() as u32;
        let bytes = tokens * self.kv_bytes_per_token;
        let kind = if swap {
            JobKind::SwapIn
        } else {
            JobKind::Prefetch
        };
        Some(self.push_job(Direction::H2d, kind, bytes, refs, now))
    }

    /// Applies the effects of a finished transfer.
    pub fn complete_transfer(&mut self, job: u64) -> Option<TransferJob> {
        let job = self.jobs.remove(&job)?;
        for pr in &job.pages {
            let Some(r) = self.requests.get_mut(&pr.request) else {
                continue;
            };
            let class = r.class;
            let Some(p) = r.pages.get_mut(pr.page as usize) else {
                continue;
            };
            match job.direction {
                Direction::D2h => {
                    p.inflight -= 1;
                    if p.host_slot {
                        p.host_tokens = p.host_tokens.max(pr.upto.min(p.tokens));
                    }
                    if p.drop_pending && p.inflight == 0 {
                        p.drop_pending = false;
                        p.on_gpu = false;
                        self.gpu_free += 1;
                        if !p.host_valid() {
                            // grew while draining; nothing sensible to keep
                            if p.host_slot {
                                p.host_slot = false;
                                self.host_used -= 1;
                            }
                            p.host_tokens = 0;
                            p.ckpt_target = 0;
                        }
                    }
                }
                Direction::H2d => {
                    p.prefetching = false;
                    p.on_gpu = true;
                }
            }
            if class == RequestClass::Offline
                && p.location() == PageLocation::Both
                && p.inflight == 0
            {
                self.lru_clock += 1;
                self.host_lru.insert((self.lru_clock, pr.request, pr.page));
            }
        }
        Some(job)
    }

    /// Contiguous runs of pages sharing a location.
    pub fn snapshot(&self, id: RequestId) -> Vec<PageRangeView> {
        let mut out: Vec<PageRangeView> = Vec::new();
        for p in self.pages(id) {
            let loc = p.location();
            match out.last_mut() {
                Some(v) if v.location == loc && v.end == p.start => v.end = p.start + p.tokens,
                _ => out.push(PageRangeView {
                    start: p.start,
                    end: p.start + p.tokens,
                    location: loc,
                }),
            }
        }
        out
    }

    /// Checks page coverage and pool accounting. `context_of` gives each
    /// tracked request's current context length.
    pub fn check_invariants(&self, context_of: impl Fn(RequestId) -> u32) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let mut gpu_used = 0u64;
        let mut host_used = 0u64;
        for (&id, r) in &self.requests {
            let mut next = 0;
            for (i, p) in r.pages.iter().enumerate() {
                if p.start != next {
                    return fail(format!(
                        "request {id}: page {i} starts at {} not {next}",
                        p.start
                    ));
                }
                if p.tokens == 0
                    || p.tokens > PAGE_TOKENS
                    || (p.tokens < PAGE_TOKENS && i + 1 != r.pages.len())
                {
                    return fail(format!("request {id}: page {i} holds {} tokens", p.tokens));
                }
                if p.host_slot && p.host_tokens > p.tokens {
                    return fail(format!("request {id}: page {i} host copy overruns"));
                }
                next += p.tokens;
            }
            if next != context_of(id) {
                return fail(format!(
                    "request {id}: pages cover {next} tokens, context is {}",
                    context_of(id)
                ));
            }
            if r.class == RequestClass::Online && r.pages.iter().any(|p| !p.on_gpu) {
                return fail(format!("online request {id} lost GPU pages"));
            }
            gpu_used += (r.gpu_slots() + r.pending + r.lifetime) as u64;
            host_used += r.pages.iter().filter(|p| p.host_slot).count() as u64;
        }
        if gpu_used + self.gpu_free as u64 != self.gpu_total as u64 {
            return fail(format!(
                "GPU pages: {gpu_used} used + {} free != {} total",
                self.gpu_free, self.gpu_total
            ));
        }
        if host_used != self.host_used as u64 || host_used > self.host_total as u64 {
            return fail(format!(
                "host pages: {host_used} counted, {} booked, {} total",
                self.host_used, self.host_total
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GIB, KIB};

    const ON: RequestClass = RequestClass::Online;
    const OFF: RequestClass = RequestClass::Offline;

    fn cluster(gpu_pages: u64, host_pages: u64) -> ClusterConfig {
        let page = 192 * KIB * 16;
        ClusterConfig {
            gpu_kv_capacity: gpu_pages * page,
            host_kv_capacity: host_pages * page,
            ..ClusterConfig::default()
        }
    }

    fn grow(kv: &mut KvManager, id: u32, class: RequestClass, n: u32) {
        kv.allocate(RequestId(id), class, n).unwrap();
        kv.commit_growth(RequestId(id), n);
    }

    #[test]
    fn allocate_rounds_up_to_pages() {
        let mut kv = KvManager::new(&cluster(100, 100));
        assert_eq!(kv.allocate(RequestId(0), ON, 17), Ok(2));
        kv.commit_growth(RequestId(0), 17);
        assert_eq!(kv.pages(RequestId(0))[1].tokens, 1);
        // the partial page absorbs the next 15 tokens
        assert_eq!(kv.growth_pages(RequestId(0), 15), 0);
        assert_eq!(kv.growth_pages(RequestId(0), 16), 1);
        kv.check_invariants(|_| 17).unwrap();
    }

    #[test]
    fn full_pool_reports_shortfall() {
        let mut kv = KvManager::new(&cluster(4, 4));
        grow(&mut kv, 0, ON, 64);
        assert_eq!(kv.allocate(RequestId(1), ON, 1), Err(Shortfall(1)));
        assert_eq!(kv.allocate(RequestId(1), ON, 40), Err(Shortfall(3)));
    }

    #[test]
    fn prefill_bytes() {
        let kv = KvManager::new(&ClusterConfig::default());
        assert_eq!(pages_for(4096), 256);
        assert_eq!(kv.bytes_for(4096), 768 * 1024 * 1024);
    }

    #[test]
    fn decode_checkpoint_is_one_small_job() {
        let mut c = cluster(1000, 1000);
        c.d2h_bandwidth = 37e9;
        c.gather_latency = 0.0;
        let mut kv = KvManager::new(&c);
        let ids: Vec<RequestId> = (0..8).map(RequestId).collect();
        for id in &ids {
            grow(&mut kv, id.0, ON, 100);
        }
        kv.checkpoint_incremental(&ids, SimTime::ZERO).unwrap();
        let t = kv.d2h_channel().busy_until;
        for id in &ids {
            grow(&mut kv, id.0, ON, 1);
        }
        let (job, done) = kv.checkpoint_incremental(&ids, t).unwrap();
        let job = kv.job(job).unwrap();
        assert_eq!(job.bytes, 8 * 196_608);
        // 1.5 MiB at 37 GB/s
        let ms = (done - t).as_ms_f64();
        assert!((ms - 8.0 * 196_608.0 / 37e9 * 1e3).abs() < 1e-5, "{ms}");
        assert!(ms < 0.05);
    }

    #[test]
    fn chunk_checkpoint_touches_128_pages() {
        let mut kv = KvManager::new(&cluster(1000, 1000));
        grow(&mut kv, 0, OFF, 2048);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        assert_eq!(kv.jobs[&job].pages.len(), 128);
        assert_eq!(kv.jobs[&job].bytes, 2048 * 196_608);
    }

    #[test]
    fn chunk_transfer_time_at_64_gib() {
        let mut ch = TransferChannel::new(Direction::D2h, 64.0 * GIB as f64);
        let (_, done) = ch.book(SimTime::ZERO, 2048 * 196_608, SimTime::ZERO);
        assert!((done.as_ms_f64() - 5.859375).abs() < 1e-6);
        assert!(done.as_ms_f64() <= 10.0);
    }

    #[test]
    fn full_host_tags_pages_for_recompute() {
        let mut kv = KvManager::new(&cluster(100, 0));
        grow(&mut kv, 0, OFF, 32);
        assert!(kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .is_none());
        assert_eq!(kv.stats().d2h_bytes, 0);
        assert!(kv.pages(RequestId(0)).iter().all(|p| p.recompute_on_evict));
        let ev = kv
            .evict_offline_pages(RequestId(0), 10, SimTime::ZERO)
            .unwrap();
        assert_eq!(ev.freed_now, 2);
        assert_eq!(ev.penalty_tokens, 32);
        assert_eq!(kv.restore_needs(RequestId(0)).discarded_tokens, 32);
    }

    #[test]
    fn full_host_reuses_oldest_offline_copy() {
        let mut kv = KvManager::new(&cluster(100, 2));
        grow(&mut kv, 0, OFF, 32);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        kv.complete_transfer(job);
        grow(&mut kv, 1, OFF, 16);
        assert!(kv
            .checkpoint_incremental(&[RequestId(1)], SimTime::ZERO)
            .is_some());
        let lost: Vec<bool> = kv
            .pages(RequestId(0))
            .iter()
            .map(|p| p.recompute_on_evict)
            .collect();
        assert_eq!(lost, vec![true, false]);
        assert_eq!(kv.host_used_pages(), 2);
    }

    #[test]
    fn checkpointed_pages_free_instantly() {
        let mut kv = KvManager::new(&cluster(200, 200));
        grow(&mut kv, 0, OFF, 1600);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        kv.complete_transfer(job);
        let free = kv.gpu_free_pages();
        let ev = kv
            .evict_offline_pages(RequestId(0), 10, SimTime(5))
            .unwrap();
        assert_eq!(
            (ev.freed_now, ev.freed_later, ev.penalty_tokens),
            (10, 0, 0)
        );
        assert_eq!(kv.gpu_free_pages(), free + 10);
        assert_eq!(kv.stats().jobs, 1);
        assert_eq!(kv.restore_needs(RequestId(0)).host_pages, 10);
        kv.check_invariants(|_| 1600).unwrap();
    }

    #[test]
    fn inflight_pages_free_on_completion() {
        let mut kv = KvManager::new(&cluster(200, 200));
        grow(&mut kv, 0, OFF, 64);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        let free = kv.gpu_free_pages();
        let ev = kv
            .evict_offline_pages(RequestId(0), 4, SimTime::ZERO)
            .unwrap();
        assert_eq!((ev.freed_now, ev.freed_later), (0, 4));
        assert_eq!(kv.gpu_free_pages(), free);
        kv.complete_transfer(job);
        assert_eq!(kv.gpu_free_pages(), free + 4);
        assert!(kv
            .pages(RequestId(0))
            .iter()
            .all(|p| p.location() == PageLocation::HostOnly));
    }

    #[test]
    fn online_pages_are_not_evictable() {
        let mut kv = KvManager::new(&cluster(10, 10));
        grow(&mut kv, 0, ON, 16);
        assert!(matches!(
            kv.evict_offline_pages(RequestId(0), 1, SimTime::ZERO),
            Err(Error::OnlineNotEvictable(RequestId(0)))
        ));
        assert!(kv
            .evict_request(RequestId(0), KvMode::Recompute, SimTime::ZERO)
            .is_err());
    }

    #[test]
    fn empty_eviction_frees_nothing() {
        let mut kv = KvManager::new(&cluster(10, 10));
        assert_eq!(
            kv.evict_offline_pages(RequestId(3), 5, SimTime::ZERO)
                .unwrap(),
            Eviction::default()
        );
    }

    #[test]
    fn request_granular_recompute() {
        let mut kv = KvManager::new(&cluster(400, 400));
        grow(&mut kv, 0, OFF, 4100);
        let ev = kv
            .evict_request(RequestId(0), KvMode::Recompute, SimTime::ZERO)
            .unwrap();
        assert_eq!(ev.penalty_tokens, 4100);
        assert_eq!(ev.freed_now, 257);
        assert_eq!(kv.gpu_free_pages(), 400);
        kv.allocate_restore(RequestId(0), 4100).unwrap();
        assert_eq!(kv.commit_restore(RequestId(0), 4100), 4100);
        assert!(kv.is_resident(RequestId(0)));
        kv.check_invariants(|_| 4100).unwrap();
    }

    #[test]
    fn swap_out_takes_bytes_over_bandwidth() {
        let mut c = cluster(400, 400);
        c.d2h_bandwidth = 37e9;
        let mut kv = KvManager::new(&c);
        grow(&mut kv, 0, OFF, 4096);
        let ev = kv
            .evict_request(RequestId(0), KvMode::Swap, SimTime::ZERO)
            .unwrap();
        let expect = SimTime::from_secs_f64(4096.0 * 196_608.0 / 37e9);
        assert_eq!(ev.swap_done, Some(expect));
        assert_eq!(ev.freed_later, 256);
        kv.complete_transfer(ev.job.unwrap());
        assert_eq!(kv.gpu_free_pages(), 400);
        let (_, done) = kv.prefetch(RequestId(0), 400, true, expect).unwrap();
        assert_eq!(
            done - expect,
            SimTime::from_secs_f64(4096.0 * 196_608.0 / c.h2d_bandwidth)
        );
    }

    #[test]
    fn prefetch_restores_host_pages() {
        let mut c = cluster(200, 200);
        c.h2d_bandwidth = 37e9;
        c.gather_latency = 0.0;
        let mut kv = KvManager::new(&c);
        grow(&mut kv, 0, OFF, 800);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        kv.complete_transfer(job);
        kv.evict_offline_pages(RequestId(0), 50, SimTime::ZERO)
            .unwrap();
        assert!(!kv.is_resident(RequestId(0)));
        let (job, done) = kv
            .prefetch(RequestId(0), 1000, false, SimTime::ZERO)
            .unwrap();
        assert!((done.as_ms_f64() - 800.0 * 196_608.0 / 37e9 * 1e3).abs() < 1e-5);
        assert!((done.as_ms_f64() - 4.25).abs() < 0.01);
        kv.complete_transfer(job);
        assert!(kv.is_resident(RequestId(0)));
        assert!(kv
            .pages(RequestId(0))
            .iter()
            .all(|p| p.location() == PageLocation::Both));
    }

    #[test]
    fn resident_request_needs_no_transfer() {
        let mut kv = KvManager::new(&cluster(200, 200));
        grow(&mut kv, 0, OFF, 100);
        let (job, _) = kv
            .checkpoint_incremental(&[RequestId(0)], SimTime::ZERO)
            .unwrap();
        kv.complete_transfer(job);
        assert!(kv.restore_needs(RequestId(0)).is_resident());
        assert!(kv
            .prefetch(RequestId(0), 100, false, SimTime::ZERO)
            .is_none());
    }

    #[test]
    fn discarded_pages_become_recompute_tokens() {
        let mut kv = KvManager::new(&cluster(200, 0));
        grow(&mut kv, 0, OFF, 320);
        kv.checkpoint_incremental(&[RequestId(0)], SimTime::ZERO);
        kv.evict_offline_pages(RequestId(0), 10, SimTime::ZERO)
            .unwrap();
        let needs = kv.restore_needs(RequestId(0));
        assert_eq!(needs.discarded_pages, 10);
        assert_eq!(needs.discarded_tokens, 160);
    }

    #[test]
    fn rollback_returns_reservation() {
        let mut kv = KvManager::new(&cluster(20, 20));
        grow(&mut kv, 0, OFF, 16);
        kv.allocate(RequestId(0), OFF, 64).unwrap();
        assert_eq!(kv.gpu_free_pages(), 15);
        kv.rollback(RequestId(0));
        assert_eq!(kv.gpu_free_pages(), 19);
        kv.check_invariants(|_| 16).unwrap();
    }

    #[test]
    fn lifetime_reservation_feeds_growth() {
        let mut kv = KvManager::new(&cluster(20, 20));
        kv.reserve_lifetime(RequestId(0), OFF, 160).unwrap();
        assert_eq!(kv.gpu_free_pages(), 10);
        assert_eq!(kv.available_for(RequestId(0)), 20);
        grow(&mut kv, 0, OFF, 100);
        assert_eq!(kv.gpu_free_pages(), 10);
        kv.check_invariants(|_| 100).unwrap();
        kv.free_request(RequestId(0));
        assert_eq!(kv.gpu_free_pages(), 20);
    }

    #[test]
    fn snapshot_merges_runs() {
        let mut kv = KvManager::new(&cluster(200, 200));
        grow(&mut kv, 0, OFF, 40);
        let snap = kv.snapshot(RequestId(0));
        assert_eq!(
            snap,
            vec![PageRangeView {
                start: 0,
                end: 40,
                location: PageLocation::GpuOnly
            }]
        );
        let json = serde_json::to_string(&snap).unwrap();
        assert_eq!(json, r#"[{"start":0,"end":40,"location":"gpu_only"}]"#);
    }
}

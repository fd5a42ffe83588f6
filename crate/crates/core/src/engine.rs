//! Discrete-event loop driving scheduler, KV manager and latency oracle.
//!
//! A run is single-threaded and deterministic: the only randomness is the
//! seeded workload and the per-iteration oracle noise.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{Direction, JobKind, KvManager, KvMode};
use crate::metrics::{time_series, MetricsReport, RunCounters, TimeSeriesRow, WINDOW_S};
use crate::perf_model::{default_grid, fit, mix, noise_factor, profile};
use crate::preemption::{
    on_memory_pressure, on_recv_online_request, safepoint_check, IterationExecution,
    SafepointAction,
};
use crate::scheduler::{Features, SchedulerPolicy, SchedulerState};
use crate::time::SimTime;
use crate::types::{ClusterConfig, Request, RequestClass, RequestId, SloConfig};
use crate::workload::{self, OfflineSource, OfflineSpec, TraceRecord, WorkloadSpec};
use crate::{OracleParams, PerfCoefficients};

const PROFILE_STREAM: u64 = 0x7072_6f66;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Where requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkloadSource {
    Trace {
        trace: PathBuf,
        /// Replenishment lengths once the trace's offline requests run out.
        #[serde(default)]
        offline: OfflineSpec,
    },
    Synthetic(WorkloadSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    /// Top the offline queue back up to the backlog size whenever it empties.
    pub replenish_offline: bool,
    /// Check KV and accounting invariants after every event.
    pub check_invariants: bool,
    /// Stop (successfully) after this many events.
    pub max_events: Option<u64>,
    /// Keep the per-event log in the output.
    pub log_events: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            replenish_offline: true,
            check_invariants: false,
            max_events: None,
            log_events: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub cluster: ClusterConfig,
    pub oracle: OracleParams,
    pub policy: SchedulerPolicy,
    /// Overrides the policy's default mechanisms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Features>,
    pub slo: SloConfig,
    pub workload: WorkloadSource,
    #[serde(default)]
    pub seed: u64,
    /// Seconds of simulated time after which the run is aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sim_time: Option<f64>,
    #[serde(default)]
    pub engine: EngineOptions,
    /// Free-form provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl RunConfig {
    pub fn features(&self) -> Features {
        self.features
            .unwrap_or_else(|| self.policy.default_features())
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.oracle.validate()?;
        self.policy.validate()?;
        self.slo.validate()?;
        match &self.workload {
            WorkloadSource::Synthetic(w) => w.validate()?,
            WorkloadSource::Trace { .. } => {}
        }
        if let Some(t) = self.max_sim_time {
            if !(t > 0.0) {
                return Err(Error::Config("max_sim_time must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn offline_spec(&self) -> &OfflineSpec {
        match &self.workload {
            WorkloadSource::Synthetic(w) => &w.offline,
            WorkloadSource::Trace { offline, .. } => offline,
        }
    }
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventRecord {
    Iteration {
        t: f64,
        end: f64,
        iter: u64,
        online_tokens: u64,
        offline_tokens: u64,
        predicted_ms: f64,
        actual_ms: f64,
        checks: u64,
        preempted: bool,
        forced_admission: bool,
        new_kv_tokens: u64,
        checkpoint_bytes: u64,
    },
    Preempt {
        t: f64,
        layer: u32,
        dropped: Vec<RequestId>,
        signaled: f64,
    },
    Evict {
        t: f64,
        request: RequestId,
        freed_now: u32,
        freed_later: u32,
        penalty_tokens: u32,
    },
    Transfer {
        t: f64,
        job: u64,
        direction: Direction,
        kind: JobKind,
        bytes: u64,
        start: f64,
    },
    Stall {
        t: f64,
        until: f64,
    },
}

/// Engine-side observations that are not part of the metrics report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunDiagnostics {
    pub events: u64,
    /// Iterations that started later than the previous iteration's end for a
    /// reason other than new arrivals (waiting for a transfer or a stall).
    pub transfer_delayed_iterations: u64,
    /// Per preemption, seconds from the monitor's signal to the drop.
    pub detection_latencies: Vec<f64>,
    /// Tokens committed by iterations; equals the requests' final progress.
    pub committed_tokens: u64,
    pub checkpoint_bytes: u64,
    /// KV tokens appended to requests that had not finished.
    pub kv_tokens: u64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub requests: Vec<Request>,
    pub events: Vec<EventRecord>,
    pub timeseries: Vec<TimeSeriesRow>,
    pub coeffs: PerfCoefficients,
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    TransferDone(u64),
    Arrival(u32),
    LayerBoundary { version: u64, layer: u32 },
    IterationEnd { version: u64 },
    MonitorWake,
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::TransferDone(_) => 0,
            EventKind::Arrival(_) => 1,
            EventKind::LayerBoundary { .. } => 2,
            EventKind::IterationEnd { .. } => 3,
            EventKind::MonitorWake => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.kind.priority(), self.seq).cmp(&(
            other.time,
            other.kind.priority(),
            other.seq,
        ))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Latency coefficients the scheduler plans with: a fit over a profile of
/// the oracle, noise included.
pub fn scheduler_coefficients(oracle: &OracleParams, seed: u64) -> Result<PerfCoefficients> {
    let samples = profile(oracle, &default_grid(), mix(seed, PROFILE_STREAM))?;
    fit(&samples)
}

struct Running {
    exec: IterationExecution,
    iter: u64,
    version: u64,
    predicted_ms: f64,
    forced: bool,
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    features: Features,
    sched: SchedulerState,
    kv: KvManager,
    reqs: Vec<Request>,
    arrivals: Vec<SimTime>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: SimTime,
    running: Option<Running>,
    next_iter: u64,
    version: u64,
    stall_until: SimTime,
    last_end: SimTime,
    arrivals_left: usize,
    online_outstanding: u64,
    end_of_trace: SimTime,
    offline_source: OfflineSource,
    backlog: u32,
    counters: RunCounters,
    diag: RunDiagnostics,
    events: Vec<EventRecord>,
    offline_window_tokens: Vec<u64>,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: SimTime, kind: EventKind) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn log(&mut self, rec: EventRecord) {
        if self.cfg.engine.log_events {
            self.events.push(rec);
        }
    }

    fn drain_jobs(&mut self) {
        for (job, done) in self.kv.take_new_jobs() {
            self.push(done, EventKind::TransferDone(job));
        }
    }

    fn replenish(&mut self) {
        if !self.sched.offline_queue.is_empty() || self.backlog == 0 {
            return;
        }
        if !self.cfg.engine.replenish_offline {
            if self.now < self.end_of_trace {
                self.counters.drained = true;
            }
            return;
        }
        for _ in 0..self.backlog {
            let rec = self.offline_source.next_at(self.now);
            let id = RequestId(self.reqs.len() as u32);
            let r = rec.to_request(id);
            self.sched.enqueue(&r);
            self.reqs.push(r);
        }
    }

    fn try_dispatch(&mut self, cause: EventKind) {
        if self.running.is_some() || self.now < self.stall_until {
            return;
        }
        self.replenish();
        let out = self
            .sched
            .build_batch(&mut self.reqs, &mut self.kv, self.now);
        for (id, ev) in &out.evictions {
            self.log(EventRecord::Evict {
                t: self.now.as_secs_f64(),
                request: *id,
                freed_now: ev.freed_now,
                freed_later: ev.freed_later,
                penalty_tokens: ev.penalty_tokens,
            });
        }
        self.drain_jobs();
        if let Some(until) = out.stall_until {
            let until = until.max(self.now);
            self.counters.stall_time_s += (until - self.now).as_secs_f64();
            self.stall_until = until;
            self.log(EventRecord::Stall {
                t: self.now.as_secs_f64(),
                until: until.as_secs_f64(),
            });
            self.push(until, EventKind::MonitorWake);
            return;
        }
        if out.plan.is_empty() {
            return;
        }
        assert!(self.now >= self.last_end, "GPU iterations overlap");
        if self.now != self.last_end
            && !matches!(cause, EventKind::Arrival(_))
            && self.next_iter > 0
        {
            self.diag.transfer_delayed_iterations += 1;
        }
        let iter = self.next_iter;
        self.next_iter += 1;
        let noise = noise_factor(
            self.cfg.oracle.noise_cv,
            mix(mix(self.cfg.seed, NOISE_STREAM), iter),
        );
        let base_ms = self.cfg.oracle.noise_free_latency(&out.plan.shape());
        let latency = SimTime::from_ms_f64(base_ms * noise);
        let exec = IterationExecution::new(
            out.plan.clone(),
            self.now,
            latency,
            &self.cfg.cluster,
            self.features.layerwise_preemption,
            noise,
        );
        self.version += 1;
        let version = self.version;
        self.push(exec.end_time(), EventKind::IterationEnd { version });
        if self.features.layerwise_preemption && exec.has_offline() {
            let points: Vec<(u32, SimTime)> = exec
                .upcoming_safepoints()
                .map(|k| (k, exec.safepoint_time(k)))
                .collect();
            for (layer, t) in points {
                self.push(t, EventKind::LayerBoundary { version, layer });
            }
        }
        self.counters.forced_admissions += u64::from(out.forced_admission);
        self.counters.iterations += 1;
        self.running = Some(Running {
            exec,
            iter,
            version,
            predicted_ms: out.plan.predicted_latency,
            forced: out.forced_admission,
        });
    }

    fn on_arrival(&mut self, idx: u32) {
        self.arrivals_left -= 1;
        let r = &self.reqs[idx as usize];
        if r.is_online() {
            self.online_outstanding += 1;
        }
        self.sched.enqueue(r);
        if let Some(run) = self.running.as_mut() {
            let pending = self.sched.pending_online_plan(&self.reqs);
            let ttft_ms = self.cfg.slo.ttft_target() * 1e3;
            on_recv_online_request(
                &self.sched.coeffs,
                &pending,
                &mut run.exec,
                ttft_ms,
                self.now,
            );
            let needed: u32 = pending
                .entries
                .iter()
                .map(|e| {
                    let extra = e.compute_tokens
                        + u32::from(
                            self.reqs[e.request.index()].remaining_prefill() == e.compute_tokens,
                        );
                    self.kv.growth_pages(e.request, extra)
                })
                .sum();
            let available = self.sched.releasable_pages(&self.kv);
            on_memory_pressure(&mut run.exec, needed, available, self.now);
        }
    }

    fn on_layer_boundary(&mut self, version: u64, layer: u32) {
        let Some(run) = self.running.as_mut() else {
            return;
        };
        if run.version != version {
            return;
        }
        let oracle = self.cfg.oracle;
        let noise = run.exec.noise;
        let signaled = run.exec.flag_raised_at;
        let action = safepoint_check(&mut run.exec, layer, |residual| {
            SimTime::from_ms_f64(oracle.noise_free_latency(&residual.shape()) * noise)
        });
        if let SafepointAction::DropOffline { layer, dropped } = action {
            self.version += 1;
            run.version = self.version;
            let end = run.exec.end_time();
            let version = run.version;
            self.sched
                .on_preempted(&dropped, &mut self.reqs, &mut self.kv);
            self.counters.preemptions += 1;
            let signaled = signaled.unwrap_or(self.now);
            self.diag
                .detection_latencies
                .push((self.now - signaled).as_secs_f64());
            self.push(end, EventKind::IterationEnd { version });
            self.log(EventRecord::Preempt {
                t: self.now.as_secs_f64(),
                layer,
                dropped,
                signaled: signaled.as_secs_f64(),
            });
        }
    }

    fn on_iteration_end(&mut self, version: u64) {
        match &self.running {
            Some(run) if run.version == version => {}
            _ => return,
        }
        let run = self.running.take().expect("checked");
        let plan = run.exec.plan.clone();
        let commit = self
            .sched
            .on_iteration_end(&plan, &mut self.reqs, &mut self.kv, self.now);
        self.diag.committed_tokens += commit.progress_tokens;
        self.counters.recomputed_tokens += commit.recomputed_tokens;
        let window = (self.now.as_secs_f64() / WINDOW_S) as usize;
        if self.offline_window_tokens.len() <= window {
            self.offline_window_tokens.resize(window + 1, 0);
        }
        self.offline_window_tokens[window] += commit.offline_progress_tokens;
        for id in &commit.completed {
            if self.reqs[id.index()].is_online() {
                self.online_outstanding -= 1;
            }
        }
        let kv_tokens = commit.live_new_kv_tokens;
        let mut checkpoint_bytes = 0;
        if self.features.kv_mode == KvMode::Incremental && !commit.touched.is_empty() {
            if let Some((job, _)) = self.kv.checkpoint_incremental(&commit.touched, self.now) {
                checkpoint_bytes = self.kv.job(job).map_or(0, |j| j.bytes);
            }
            self.drain_jobs();
        }
        self.diag.checkpoint_bytes += checkpoint_bytes;
        self.diag.kv_tokens += kv_tokens;
        let (online_tokens, offline_tokens) =
            plan.entries
                .iter()
                .fold((0u64, 0u64), |(on, off), e| match e.class {
                    RequestClass::Online => (on + e.compute_tokens as u64, off),
                    RequestClass::Offline => (on, off + e.compute_tokens as u64),
                });
        self.last_end = self.now;
        let rec = EventRecord::Iteration {
            t: run.exec.start_time.as_secs_f64(),
            end: self.now.as_secs_f64(),
            iter: run.iter,
            online_tokens,
            offline_tokens,
            predicted_ms: run.predicted_ms,
            actual_ms: (self.now - run.exec.start_time).as_ms_f64(),
            checks: run.exec.num_checks() * u64::from(self.features.layerwise_preemption),
            preempted: run.exec.preempted_at_layer.is_some(),
            forced_admission: run.forced,
            new_kv_tokens: kv_tokens,
            checkpoint_bytes,
        };
        self.log(rec);
    }

    fn on_transfer_done(&mut self, job: u64) {
        if let Some(j) = self.kv.complete_transfer(job) {
            let rec = EventRecord::Transfer {
                t: self.now.as_secs_f64(),
                job: j.id,
                direction: j.direction,
                kind: j.kind,
                bytes: j.bytes,
                start: j.start.as_secs_f64(),
            };
            self.log(rec);
        }
    }

    fn check_invariants(&self) -> Result<()> {
        let reqs = &self.reqs;
        self.kv
            .check_invariants(|id| reqs[id.index()].context_len())?;
        let progress: u64 = self.reqs.iter().map(|r| r.context_len() as u64).sum();
        if progress != self.diag.committed_tokens {
            return Err(Error::Invariant(format!(
                "committed {} tokens but requests hold {progress}",
                self.diag.committed_tokens
            )));
        }
        if let Some(run) = &self.running {
            if run.exec.start_time < self.last_end {
                return Err(Error::Invariant("GPU iterations overlap".into()));
            }
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.arrivals_left == 0 && self.online_outstanding == 0 && self.now >= self.end_of_trace
    }

    fn diagnostic(&self) -> String {
        format!(
            "online queued {}, decoding {}, offline paused {}, queued {}, gpu free {}/{} pages, running {}",
            self.sched.online_queue.len(),
            self.sched.online_decoding.len(),
            self.sched.paused_offline.len(),
            self.sched.offline_queue.len(),
            self.kv.gpu_free_pages(),
            self.kv.gpu_total_pages(),
            self.running.is_some(),
        )
    }
}

fn load_records(cfg: &RunConfig, base_dir: Option<&Path>) -> Result<(Vec<TraceRecord>, SimTime)> {
    match &cfg.workload {
        WorkloadSource::Synthetic(w) => {
            let recs = workload::generate(w, base_dir)?;
            Ok((recs, SimTime::from_secs_f64(w.online.duration)))
        }
        WorkloadSource::Trace { trace, .. } => {
            let path = match base_dir {
                Some(d) if trace.is_relative() => d.join(trace),
                _ => trace.clone(),
            };
            let recs = workload::load_trace(&path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
                other => other,
            })?;
            let end = recs.last().map_or(SimTime::ZERO, |r| r.t);
            Ok((recs, end))
        }
    }
}

/// Runs one simulation. Relative file paths in the workload resolve against
/// `base_dir`.
pub fn run_with_base(cfg: &RunConfig, base_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let coeffs = scheduler_coefficients(&cfg.oracle, cfg.seed)?;
    run_with_coefficients(cfg, base_dir, coeffs)
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    run_with_base(cfg, None)
}

/// Runs with the given scheduler coefficients instead of profiling.
pub fn run_with_coefficients(
    cfg: &RunConfig,
    base_dir: Option<&Path>,
    coeffs: PerfCoefficients,
) -> Result<RunOutput> {
    cfg.validate()?;
    let features = cfg.features();
    let (records, end_of_trace) = load_records(cfg, base_dir)?;
    let reqs = workload::to_requests(&records);
    let offline_spec = cfg.offline_spec();
    let source_spec = WorkloadSpec {
        online: workload::OnlineSpec {
            rate: 1.0,
            cv: 1.0,
            duration: 1.0,
            lengths: Default::default(),
        },
        offline: offline_spec.clone(),
        seed: mix(cfg.seed, 0x7265_706c),
    };
    let backlog = records
        .iter()
        .filter(|r| r.class == RequestClass::Offline)
        .count() as u32;
    let backlog = backlog.max(offline_spec.backlog);
    let max_sim = SimTime::from_secs_f64(
        cfg.max_sim_time
            .unwrap_or(10.0 * end_of_trace.as_secs_f64() + 3600.0),
    );

    let mut sim = Sim {
        cfg,
        features,
        sched: SchedulerState::new(cfg.policy, features, coeffs, cfg.slo, &cfg.cluster),
        kv: KvManager::new(&cfg.cluster),
        arrivals: records.iter().map(|r| r.t).collect(),
        reqs,
        heap: BinaryHeap::new(),
        seq: 0,
        now: SimTime::ZERO,
        running: None,
        next_iter: 0,
        version: 0,
        stall_until: SimTime::ZERO,
        last_end: SimTime::ZERO,
        arrivals_left: records.len(),
        online_outstanding: 0,
        end_of_trace,
        offline_source: workload::offline_backlog(&source_spec, base_dir)?,
        backlog,
        counters: RunCounters::default(),
        diag: RunDiagnostics::default(),
        events: Vec::new(),
        offline_window_tokens: Vec::new(),
    };
    for i in 0..sim.arrivals.len() {
        let t = sim.arrivals[i];
        sim.push(t, EventKind::Arrival(i as u32));
    }

    while let Some(Reverse(ev)) = sim.heap.pop() {
        if ev.time > max_sim {
            return Err(Error::Livelock {
                limit_s: max_sim.as_secs_f64(),
                now_s: ev.time.as_secs_f64(),
                diagnostic: sim.diagnostic(),
            });
        }
        sim.now = ev.time;
        sim.diag.events += 1;
        match ev.kind {
            EventKind::Arrival(i) => sim.on_arrival(i),
            EventKind::TransferDone(job) => sim.on_transfer_done(job),
            EventKind::LayerBoundary { version, layer } => sim.on_layer_boundary(version, layer),
            EventKind::IterationEnd { version } => sim.on_iteration_end(version),
            EventKind::MonitorWake => {}
        }
        if sim.finished() {
            break;
        }
        sim.try_dispatch(ev.kind);
        if cfg.engine.check_invariants {
            sim.check_invariants()?;
        }
        if cfg.engine.max_events.is_some_and(|m| sim.diag.events >= m) {
            sim.diag.stopped_early = true;
            break;
        }
    }
    if sim.heap.is_empty() && sim.arrivals_left == 0 && sim.online_outstanding == 0 {
        // nothing left to run: idle until the end of the trace
        sim.now = sim.now.max(end_of_trace);
    }
    if !sim.finished() && !sim.diag.stopped_early {
        return Err(Error::Livelock {
            limit_s: max_sim.as_secs_f64(),
            now_s: sim.now.as_secs_f64(),
            diagnostic: format!("no pending events; {}", sim.diagnostic()),
        });
    }

    let horizon = sim.now.max(end_of_trace).as_secs_f64();
    let d = sim.kv.stats();
    sim.counters.transferred_bytes.d2h = d.d2h_bytes;
    sim.counters.transferred_bytes.h2d = d.h2d_bytes;
    let report = MetricsReport::compute(&sim.reqs, &cfg.slo, horizon, &sim.counters);
    let timeseries = time_series(&sim.reqs, &sim.offline_window_tokens, horizon);
    Ok(RunOutput {
        report,
        requests: sim.reqs,
        events: sim.events,
        timeseries,
        coeffs,
        diagnostics: sim.diag,
    })
}

/// `metrics.json` contents.
pub fn metrics_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

fn opt_secs(t: Option<f64>) -> String {
    t.map(|v| format!("{v:.9}")).unwrap_or_default()
}

/// `requests.csv`: one row per request, TBT gaps inline and `;`-separated.
pub fn requests_csv(requests: &[Request]) -> String {
    let mut out = String::from("id,class,arrival,ttft,tbt_list,finish\n");
    for r in requests {
        let class = match r.class {
            RequestClass::Online => "online",
            RequestClass::Offline => "offline",
        };
        let tbts: Vec<String> = crate::metrics::tbt_samples(r)
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect();
        let finish = if r.is_finished() {
            r.token_completion_times.last().map(|t| t.as_secs_f64())
        } else {
            None
        };
        let _ = writeln!(
            out,
            "{},{},{:.9},{},{},{}",
            r.id,
            class,
            r.arrival_time.as_secs_f64(),
            opt_secs(crate::metrics::ttft(r)),
            tbts.join(";"),
            opt_secs(finish)
        );
    }
    out
}

pub fn timeseries_csv(rows: &[TimeSeriesRow]) -> String {
    let mut out = String::from("t,p99_ttft_5s,p99_tbt_5s,offline_tput_5s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.3}",
            r.t, r.p99_ttft_5s, r.p99_tbt_5s, r.offline_tput_5s
        );
    }
    out
}

/// Writes `metrics.json`, `events.jsonl`, `requests.csv` and `timeseries.csv`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), metrics_json(&out.report))?;
    let mut ev = String::new();
    for e in &out.events {
        ev += &serde_json::to_string(e)?;
        ev.push('\n');
    }
    fs::write(dir.join("events.jsonl"), ev)?;
    fs::write(dir.join("requests.csv"), requests_csv(&out.requests))?;
    fs::write(dir.join("timeseries.csv"), timeseries_csv(&out.timeseries))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rate,
    SloScale,
    Cv,
    InLen,
    OutLen,
}

impl SweepAxis {
    fn tag(self) -> u64 {
        match self {
            SweepAxis::Rate => 1,
            SweepAxis::SloScale => 2,
            SweepAxis::Cv => 3,
            SweepAxis::InLen => 4,
            SweepAxis::OutLen => 5,
        }
    }
}

/// The configuration of one sweep point.
///
/// Workload axes get a fresh seed `mix(mix(seed, axis), value)`. The SLO
/// scale axis keeps the base seed so every point sees the same requests.
/// Length axes rescale the rate so offered tokens per second stay constant.
pub fn sweep_point(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if axis == SweepAxis::SloScale {
        cfg.slo.scale = value;
        return Ok(cfg);
    }
    let WorkloadSource::Synthetic(w) = &mut cfg.workload else {
        return Err(Error::Config(format!(
            "sweeping {axis:?} needs a synthetic workload"
        )));
    };
    if w.online.lengths.lengths_file.is_some()
        && matches!(axis, SweepAxis::InLen | SweepAxis::OutLen)
    {
        return Err(Error::Config("length sweeps need fixed lengths".into()));
    }
    let o = &mut w.online;
    let before = (o.lengths.input_tokens + o.lengths.output_tokens) as f64;
    let as_count = |v: f64| -> Result<u32> {
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(Error::Config(format!(
                "length {v} is not a positive integer"
            )))
        }
    };
    match axis {
        SweepAxis::Rate => o.rate = value,
        SweepAxis::Cv => o.cv = value,
        SweepAxis::InLen => o.lengths.input_tokens = as_count(value)?,
        SweepAxis::OutLen => o.lengths.output_tokens = as_count(value)?,
        SweepAxis::SloScale => unreachable!(),
    }
    let after = (o.lengths.input_tokens + o.lengths.output_tokens) as f64;
    o.rate *= before / after;
    let seed = mix(mix(base.seed, axis.tag()), value.to_bits());
    w.seed = seed;
    cfg.seed = seed;
    Ok(cfg)
}

/// One independent run per value, in parallel; reports come back in input
/// order.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    base_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| sweep_point(base, axis, v))
        .collect::<Result<_>>()?;
    configs
        .par_iter()
        .map(|c| run_with_base(c, base_dir).map(|o| o.report))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{LengthSpec, OnlineSpec};

    fn oracle() -> OracleParams {
        OracleParams {
            k1: 0.02,
            k2: 7e-7,
            k3: 0.0,
            k4: 3e-4,
            k5: 6.0,
            noise_cv: 0.0,
        }
    }

    fn config(policy: SchedulerPolicy, backlog: u32) -> RunConfig {
        RunConfig {
            cluster: ClusterConfig {
                gpu_kv_capacity: 8 * crate::types::GIB,
                ..ClusterConfig::default()
            },
            oracle: oracle(),
            policy,
            features: None,
            slo: SloConfig {
                ttft_slo: 1.0,
                tbt_slo: 0.1,
                scale: 1.0,
                safety_margin: 0.05,
            },
            workload: WorkloadSource::Synthetic(WorkloadSpec {
                online: OnlineSpec {
                    rate: 2.0,
                    cv: 0.5,
                    duration: 20.0,
                    lengths: LengthSpec::fixed(1024, 32),
                },
                offline: OfflineSpec {
                    backlog,
                    lengths: LengthSpec::fixed(2048, 64),
                },
                seed: 7,
            }),
            seed: 7,
            max_sim_time: None,
            engine: EngineOptions {
                check_invariants: true,
                ..EngineOptions::default()
            },
            notes: None,
        }
    }

    #[test]
    fn event_order_breaks_ties_by_kind() {
        let t = SimTime(5);
        let mut h = BinaryHeap::new();
        h.push(Reverse(Event {
            time: t,
            seq: 1,
            kind: EventKind::MonitorWake,
        }));
        h.push(Reverse(Event {
            time: t,
            seq: 2,
            kind: EventKind::IterationEnd { version: 0 },
        }));
        h.push(Reverse(Event {
            time: t,
            seq: 3,
            kind: EventKind::Arrival(0),
        }));
        h.push(Reverse(Event {
            time: t,
            seq: 4,
            kind: EventKind::TransferDone(0),
        }));
        h.push(Reverse(Event {
            time: SimTime(4),
            seq: 5,
            kind: EventKind::MonitorWake,
        }));
        let order: Vec<u8> =
            std::iter::from_fn(|| h.pop().map(|Reverse(e)| e.kind.priority())).collect();
        assert_eq!(order, vec![4, 0, 1, 3, 4]);
    }

    #[test]
    fn runs_and_is_deterministic() {
        for policy in [
            SchedulerPolicy::ConServe,
            SchedulerPolicy::SarathiPreemptive { chunk_size: 2048 },
            SchedulerPolicy::NonPreemptive { chunk_size: 2048 },
            SchedulerPolicy::OnlineOnly { chunk_size: 2048 },
        ] {
            let cfg = config(policy, 16);
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(
                metrics_json(&a.report),
                metrics_json(&b.report),
                "{policy:?}"
            );
            assert!(a.report.online_requests > 20);
            assert_eq!(a.report.online_unfinished_prefill, 0);
            if matches!(policy, SchedulerPolicy::OnlineOnly { .. }) {
                assert_eq!(a.report.offline_throughput, 0.0);
            } else {
                assert!(a.report.offline_throughput > 0.0, "{policy:?}");
            }
        }
    }

    #[test]
    fn tokens_never_precede_arrival() {
        let out = run(&config(SchedulerPolicy::ConServe, 8)).unwrap();
        let min_prefill_s =
            oracle().noise_free_latency(&crate::perf_model::BatchShape::single(1, 0)) / 1e3;
        for r in &out.requests {
            if let Some(t) = r.first_token_time {
                assert!(t > r.arrival_time);
                if r.is_online() {
                    assert!((t - r.arrival_time).as_secs_f64() >= min_prefill_s);
                }
            }
        }
    }

    #[test]
    fn livelock_guard_fires() {
        let mut cfg = config(SchedulerPolicy::ConServe, 0);
        cfg.max_sim_time = Some(1.0);
        assert!(matches!(run(&cfg), Err(Error::Livelock { .. })));
    }

    #[test]
    fn sweep_orders_reports() {
        let cfg = config(SchedulerPolicy::OnlineOnly { chunk_size: 2048 }, 0);
        let reports = sweep(&cfg, SweepAxis::Rate, &[1.0, 2.0, 4.0], None).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports[0].online_requests < reports[2].online_requests);
        let p = sweep_point(&cfg, SweepAxis::InLen, 2048.0).unwrap();
        let WorkloadSource::Synthetic(w) = &p.workload else {
            unreachable!()
        };
        assert!((w.online.rate - 2.0 * 1056.0 / 2080.0).abs() < 1e-12);
        assert!(sweep(&cfg, SweepAxis::Rate, &[], None).is_err());
    }

    #[test]
    fn config_json_accepts_trace_or_synthetic() {
        let cfg = config(SchedulerPolicy::ConServe, 4);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let v = serde_json::json!({
            "oracle": {"k1": 0.02, "k2": 0.0, "k3": 0.0, "k4": 0.0003, "k5": 6.0},
            "policy": {"kind": "online_only"},
            "slo": {"ttft_slo": 1.0, "tbt_slo": 0.1},
            "workload": {"trace": "t.jsonl"}
        });
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(c.workload, WorkloadSource::Trace { .. }));
    }
}

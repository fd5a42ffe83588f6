//! Sub-iteration preemption of offline work.
//!
//! An iteration runs layer by layer. Every `safepoint_interval_layers` layers
//! (but not after the last one) the model checks a preemption flag, which
//! costs `safepoint_check_cost` whether or not the flag is set. When set, the
//! offline entries leave the batch and the remaining layers run the online
//! entries alone.
//!
//! The monitor raises the flag when an online request arrives and finishing
//! the current batch before serving it would blow the TTFT target.

use serde::Serialize;

use crate::perf_model::{estimate_exec_time, BatchPlan, Coefficients};
use crate::scalar::Scalar;
use crate::time::SimTime;
use crate::types::{ClusterConfig, RequestClass, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MonitorDecision {
    NoOp,
    SignalPreempt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SafepointAction {
    Continue,
    DropOffline { layer: u32, dropped: Vec<RequestId> },
}

/// Timeline of one in-flight iteration.
///
/// Layer `k` of the current segment finishes at
/// `segment_start + segment_latency·(k − segment_layer)/num_layers` plus the
/// cost of every safepoint passed on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationExecution {
    pub plan: BatchPlan,
    pub start_time: SimTime,
    pub num_layers: u32,
    pub interval: u32,
    /// Zero when the model is not instrumented.
    pub check_cost: SimTime,
    /// Ground-truth noise factor drawn at dispatch.
    pub noise: f64,
    /// Ground-truth latency of the original plan, uninstrumented.
    pub latency: SimTime,
    pub layers_done: u32,
    pub preempt_flag: bool,
    pub flag_raised_at: Option<SimTime>,
    pub preempted_at_layer: Option<u32>,
    pub dropped: Vec<RequestId>,
    segment_start: SimTime,
    segment_layer: u32,
    /// Whole-iteration latency the current segment runs at.
    segment_latency: SimTime,
}

impl IterationExecution {
    pub fn new(
        plan: BatchPlan,
        start: SimTime,
        latency: SimTime,
        cluster: &ClusterConfig,
        instrumented: bool,
        noise: f64,
    ) -> Self {
        let check_cost = if instrumented {
            SimTime::from_secs_f64(cluster.safepoint_check_cost)
        } else {
            SimTime::ZERO
        };
        IterationExecution {
            plan,
            start_time: start,
            num_layers: cluster.num_layers,
            interval: cluster.safepoint_interval_layers,
            check_cost,
            noise,
            latency,
            layers_done: 0,
            preempt_flag: false,
            flag_raised_at: None,
            preempted_at_layer: None,
            dropped: Vec::new(),
            segment_start: start,
            segment_layer: 0,
            segment_latency: latency,
        }
    }

    /// Safepoints strictly between layers `a` and `b` (`b ≤ num_layers`).
    fn checks_between(&self, a: u32, b: u32) -> u64 {
        if b <= a + 1 {
            return 0;
        }
        ((b - 1) / self.interval - a / self.interval) as u64
    }

    /// Safepoints in an uninterrupted iteration.
    pub fn num_checks(&self) -> u64 {
        self.checks_between(0, self.num_layers)
    }

    /// Time layer `k` of the current segment completes, before its safepoint check.
    pub fn layer_end(&self, k: u32) -> SimTime {
        debug_assert!(k >= self.segment_layer && k <= self.num_layers);
        if self.plan.is_empty() {
            return self.segment_start;
        }
        let compute = self.segment_latency.as_nanos() as u128 * (k - self.segment_layer) as u128
            / self.num_layers as u128;
        let checks = self.check_cost.as_nanos() * self.checks_between(self.segment_layer, k);
        self.segment_start + SimTime(compute as u64 + checks)
    }

    /// Time the safepoint after layer `k` has read the flag.
    pub fn safepoint_time(&self, k: u32) -> SimTime {
        self.layer_end(k) + self.check_cost
    }

    pub fn end_time(&self) -> SimTime {
        self.layer_end(self.num_layers)
    }

    /// Safepoint layers not yet reached.
    pub fn upcoming_safepoints(&self) -> impl Iterator<Item = u32> + '_ {
        let first = (self.segment_layer / self.interval + 1) * self.interval;
        (first..self.num_layers).step_by(self.interval as usize)
    }

    /// Time of one layer in the current segment.
    pub fn per_layer_time(&self) -> SimTime {
        SimTime(self.segment_latency.as_nanos() / self.num_layers as u64)
    }

    pub fn elapsed(&self, now: SimTime) -> SimTime {
        now.saturating_sub(self.start_time)
    }

    pub fn has_offline(&self) -> bool {
        self.plan.has_class(RequestClass::Offline)
    }
}

/// Runs when an online request arrives during an iteration.
///
/// `pending_online` holds all online work not in the running batch, as a
/// prefill plan; `ttft_target_ms` is the scaled TTFT objective.
pub fn on_recv_online_request<T: Scalar>(
    coeffs: &Coefficients<T>,
    pending_online: &BatchPlan,
    exec: &mut IterationExecution,
    ttft_target_ms: f64,
    now: SimTime,
) -> MonitorDecision {
    if !exec.has_offline() {
        return MonitorDecision::NoOp;
    }
    let t_online = estimate_exec_time(coeffs, pending_online).to_f64_lossy();
    let t_remaining =
        estimate_exec_time(coeffs, &exec.plan).to_f64_lossy() - exec.elapsed(now).as_ms_f64();
    if t_remaining + t_online > ttft_target_ms {
        signal(exec, now)
    } else {
        MonitorDecision::NoOp
    }
}

/// Signals when the arrival cannot get memory without first dropping offline
/// work from the running batch.
pub fn on_memory_pressure(
    exec: &mut IterationExecution,
    needed_pages: u32,
    available_pages: u32,
    now: SimTime,
) -> MonitorDecision {
    if exec.has_offline() && needed_pages > available_pages {
        signal(exec, now)
    } else {
        MonitorDecision::NoOp
    }
}

fn signal(exec: &mut IterationExecution, now: SimTime) -> MonitorDecision {
    if !exec.preempt_flag {
        exec.preempt_flag = true;
        exec.flag_raised_at = Some(now);
    }
    MonitorDecision::SignalPreempt
}

/// Safepoint after layer `layer`. On a raised flag the offline entries are
/// dropped and the remaining layers are re-timed from `residual_latency`, the
/// whole-iteration latency of the online-only plan.
pub fn safepoint_check(
    exec: &mut IterationExecution,
    layer: u32,
    residual_latency: impl FnOnce(&BatchPlan) -> SimTime,
) -> SafepointAction {
    debug_assert!(layer.is_multiple_of(exec.interval) && layer < exec.num_layers);
    exec.layers_done = layer;
    if !exec.preempt_flag {
        return SafepointAction::Continue;
    }
    exec.preempt_flag = false;
    if !exec.has_offline() {
        return SafepointAction::Continue;
    }
    let drop_at = exec.safepoint_time(layer);
    let residual = exec.plan.retain_class(RequestClass::Online);
    let dropped: Vec<RequestId> = exec
        .plan
        .entries
        .iter()
        .filter(|e| e.class == RequestClass::Offline)
        .map(|e| e.request)
        .collect();
    exec.segment_latency = if residual.is_empty() {
        SimTime::ZERO
    } else {
        residual_latency(&residual)
    };
    exec.segment_start = drop_at;
    exec.segment_layer = layer;
    exec.plan = residual;
    exec.preempted_at_layer = Some(layer);
    exec.dropped.extend(dropped.iter().copied());
    SafepointAction::DropOffline { layer, dropped }
}

/// Host read of the flag.
pub const FLAG_READ_COST: f64 = 7e-6;
/// Cross-device barrier counted on a single device.
pub const BARRIER_COST: f64 = 14e-6;
/// Extra barrier lag per doubling of the tensor-parallel group.
pub const TP_LAG_PER_DOUBLING: f64 = 73.1e-6;

/// Per-check cost in seconds. A single device only reads the flag; with
/// `count_barrier` it also pays the barrier it would run in a group.
pub fn safepoint_cost(tp_degree: u32, count_barrier: bool) -> f64 {
    let tp = tp_degree.max(1);
    if tp == 1 {
        return if count_barrier {
            FLAG_READ_COST + BARRIER_COST
        } else {
            FLAG_READ_COST
        };
    }
    FLAG_READ_COST + BARRIER_COST + TP_LAG_PER_DOUBLING * (tp as f64).log2()
}

pub fn tp_safepoint_cost(tp_degree: u32) -> f64 {
    safepoint_cost(tp_degree, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::{EntryKind, PlanEntry};

    fn entry(id: u32, class: RequestClass, p: u32, c: u32) -> PlanEntry {
        PlanEntry {
            request: RequestId(id),
            class,
            kind: if p == 1 {
                EntryKind::Decode
            } else {
                EntryKind::Prefill
            },
            compute_tokens: p,
            context_tokens: c,
        }
    }

    fn mixed_plan() -> BatchPlan {
        let mut plan = BatchPlan::new();
        plan.push(entry(0, RequestClass::Online, 1, 100));
        plan.push(entry(1, RequestClass::Offline, 512, 0));
        plan
    }

    fn cluster_32() -> ClusterConfig {
        ClusterConfig {
            num_layers: 32,
            safepoint_interval_layers: 4,
            safepoint_check_cost: 21e-6,
            ..Default::default()
        }
    }

    fn ms(v: f64) -> SimTime {
        SimTime::from_ms_f64(v)
    }

    #[test]
    fn monitor_inequality() {
        // 1 ms per compute token: the running plan costs 250 ms, pending online 20 ms
        let coeffs = Coefficients::new(1.0, 0.0, 0.0, 0.0);
        let mut running = BatchPlan::new();
        running.push(entry(0, RequestClass::Online, 1, 0));
        running.push(entry(1, RequestClass::Offline, 249, 0));
        let mut pending = BatchPlan::new();
        pending.push(entry(5, RequestClass::Online, 20, 0));

        let mut exec = IterationExecution::new(
            running.clone(),
            SimTime::ZERO,
            ms(250.0),
            &cluster_32(),
            true,
            1.0,
        );
        // 50 remaining + 20 ≤ 100
        let d = on_recv_online_request(&coeffs, &pending, &mut exec, 100.0, ms(200.0));
        assert_eq!(d, MonitorDecision::NoOp);
        assert!(!exec.preempt_flag);
        // 200 remaining + 20 > 100
        let d = on_recv_online_request(&coeffs, &pending, &mut exec, 100.0, ms(50.0));
        assert_eq!(d, MonitorDecision::SignalPreempt);
        assert!(exec.preempt_flag);
        assert_eq!(exec.flag_raised_at, Some(ms(50.0)));
    }

    #[test]
    fn memory_pressure_signals() {
        let mut exec = IterationExecution::new(
            mixed_plan(),
            SimTime::ZERO,
            ms(50.0),
            &cluster_32(),
            true,
            1.0,
        );
        assert_eq!(
            on_memory_pressure(&mut exec, 10, 10, SimTime::ZERO),
            MonitorDecision::NoOp
        );
        assert_eq!(
            on_memory_pressure(&mut exec, 11, 10, SimTime::ZERO),
            MonitorDecision::SignalPreempt
        );
    }

    #[test]
    fn online_only_batch_never_signals() {
        let mut plan = BatchPlan::new();
        plan.push(entry(0, RequestClass::Online, 2048, 0));
        let mut exec =
            IterationExecution::new(plan, SimTime::ZERO, ms(500.0), &cluster_32(), true, 1.0);
        let coeffs = Coefficients::new(1.0, 1.0, 1.0, 1000.0);
        let d = on_recv_online_request(&coeffs, &BatchPlan::new(), &mut exec, 1.0, SimTime::ZERO);
        assert_eq!(d, MonitorDecision::NoOp);
        assert_eq!(
            on_memory_pressure(&mut exec, 100, 0, SimTime::ZERO),
            MonitorDecision::NoOp
        );
    }

    #[test]
    fn uninterrupted_iteration_pays_every_check() {
        let exec = IterationExecution::new(
            mixed_plan(),
            SimTime::ZERO,
            ms(256.0),
            &cluster_32(),
            true,
            1.0,
        );
        assert_eq!(exec.num_checks(), 7);
        assert_eq!(exec.end_time(), ms(256.0) + SimTime(7 * 21_000));
        let plain = IterationExecution::new(
            mixed_plan(),
            SimTime::ZERO,
            ms(256.0),
            &cluster_32(),
            false,
            1.0,
        );
        assert_eq!(plain.end_time(), ms(256.0));
        assert_eq!(
            exec.upcoming_safepoints().collect::<Vec<_>>(),
            vec![4, 8, 12, 16, 20, 24, 28]
        );
    }

    #[test]
    fn signal_detected_at_next_safepoint() {
        // 8 ms per layer, flag raised 10 ms in
        let mut exec = IterationExecution::new(
            mixed_plan(),
            SimTime::ZERO,
            ms(256.0),
            &cluster_32(),
            true,
            1.0,
        );
        signal(&mut exec, ms(10.0));
        let detect = exec.safepoint_time(4);
        assert_eq!(detect, ms(32.0) + SimTime(21_000));
        let action = safepoint_check(&mut exec, 4, |_| ms(100.0));
        assert_eq!(
            action,
            SafepointAction::DropOffline {
                layer: 4,
                dropped: vec![RequestId(1)]
            }
        );
        assert!(detect - ms(10.0) <= ms(32.0) + SimTime(21_000));
        // 28 layers left at 100 ms per iteration plus 6 remaining checks
        let expect = detect + SimTime(100_000_000 * 28 / 32) + SimTime(6 * 21_000);
        assert_eq!(exec.end_time(), expect);
        assert_eq!(exec.preempted_at_layer, Some(4));
        assert!(!exec.preempt_flag);
    }

    #[test]
    fn all_offline_batch_ends_at_drop() {
        let mut plan = BatchPlan::new();
        plan.push(entry(1, RequestClass::Offline, 512, 0));
        let mut exec =
            IterationExecution::new(plan, SimTime::ZERO, ms(64.0), &cluster_32(), true, 1.0);
        signal(&mut exec, ms(1.0));
        let t = exec.safepoint_time(4);
        safepoint_check(&mut exec, 4, |_| unreachable!());
        assert_eq!(exec.end_time(), t);
        assert!(exec.plan.is_empty());
    }

    #[test]
    fn unset_flag_continues() {
        let mut exec = IterationExecution::new(
            mixed_plan(),
            SimTime::ZERO,
            ms(64.0),
            &cluster_32(),
            true,
            1.0,
        );
        let end = exec.end_time();
        assert_eq!(
            safepoint_check(&mut exec, 8, |_| unreachable!()),
            SafepointAction::Continue
        );
        assert_eq!(exec.end_time(), end);
    }

    #[test]
    fn non_multiple_layer_count() {
        let c = ClusterConfig {
            num_layers: 30,
            ..cluster_32()
        };
        let exec = IterationExecution::new(mixed_plan(), SimTime::ZERO, ms(30.0), &c, true, 1.0);
        assert_eq!(exec.num_checks(), 7);
        assert_eq!(c.safepoints_per_iteration(), 7);
        let c = ClusterConfig {
            num_layers: 33,
            ..cluster_32()
        };
        assert_eq!(
            IterationExecution::new(mixed_plan(), SimTime::ZERO, ms(30.0), &c, true, 1.0)
                .num_checks(),
            8
        );
    }

    #[test]
    fn safepoint_costs() {
        assert!((tp_safepoint_cost(1) - 7e-6).abs() < 1e-12);
        assert!((safepoint_cost(1, true) - 21e-6).abs() < 1e-12);
        assert!((tp_safepoint_cost(4) - 167.2e-6).abs() < 1e-12);
        assert!(tp_safepoint_cost(8) > tp_safepoint_cost(4));
    }
}

//! Context-aware iteration latency model.
//!
//! Latency of a batch is modeled as
//!
//! ```text
//! L = a_lin·ΣP_i + a_quad·ΣP_i(P_i + C_i) + a_mem·Σ(P_i + C_i) + a_const
//! ```
//!
//! where `P_i` are the compute tokens of entry `i` and `C_i` the context
//! tokens whose KV it reads. The attention and memory terms are evaluated per
//! entry; a single-entry batch reduces to the aggregate form the profiler
//! measures. [`OracleParams`] is the ground truth that stands in for GPU
//! execution; [`Coefficients`] is what the scheduler fits and consults.

mod fit;
mod oracle;
mod plan;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub use fit::{fit, fit_error_p99, relative_errors, ProfileDocument, Sample};
pub use oracle::{default_grid, mix, noise_factor, oracle_latency, profile, OracleParams};
pub use plan::{BatchPlan, BatchShape, EntryKind, PlanEntry};

/// Fitted latency-model coefficients, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coefficients<T> {
    /// Per compute token.
    pub a_lin: T,
    /// Per compute token per attended token.
    pub a_quad: T,
    /// Per token of KV read.
    pub a_mem: T,
    /// Per iteration.
    pub a_const: T,
}

impl<T: Scalar> Coefficients<T> {
    pub fn new(a_lin: T, a_quad: T, a_mem: T, a_const: T) -> Self {
        Coefficients {
            a_lin,
            a_quad,
            a_mem,
            a_const,
        }
    }

    /// Predicted latency in ms. An empty batch dispatches nothing and costs 0.
    pub fn predict(&self, shape: &BatchShape) -> T {
        if shape.is_empty() {
            return T::zero();
        }
        self.a_lin * T::from_count(shape.total_p)
            + self.a_quad * T::from_count(shape.attention)
            + self.a_mem * T::from_count(shape.memory)
            + self.a_const
    }

    pub fn predict_plan(&self, plan: &BatchPlan) -> T {
        self.predict(&plan.shape())
    }

    pub fn is_nonnegative(&self) -> bool {
        [self.a_lin, self.a_quad, self.a_mem, self.a_const]
            .iter()
            .all(|v| *v >= T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Coefficients<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Coefficients::new(
            c(self.a_lin),
            c(self.a_quad),
            c(self.a_mem),
            c(self.a_const),
        )
    }
}

/// Alias of [`Coefficients::predict_plan`] under the name the preemption
/// monitor uses.
pub fn estimate_exec_time<T: Scalar>(coeffs: &Coefficients<T>, plan: &BatchPlan) -> T {
    coeffs.predict_plan(plan)
}

pub fn predict<T: Scalar>(coeffs: &Coefficients<T>, plan: &BatchPlan) -> T {
    coeffs.predict_plan(plan)
}

/// Work a request could contribute to the batch being built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    /// Compute tokens the request still has for this kind of work.
    pub remaining: u32,
    /// Context tokens the new entry attends to.
    pub context: u32,
}

fn fits<T: Scalar>(
    coeffs: &Coefficients<T>,
    base: &BatchShape,
    p: u32,
    context: u32,
    budget: T,
) -> bool {
    let mut s = *base;
    s.add(p, context);
    coeffs.predict(&s) <= budget
}

/// Largest number of compute tokens of `cand` that can join the batch while
/// its predicted latency stays within `budget_ms`.
///
/// Solves `a_quad·p² + (a_lin + a_quad·C + a_mem)·p + (L₀ + a_mem·C − budget) ≤ 0`
/// for the positive root, where `L₀` is the current prediction (or `a_const`
/// for an empty batch), then confirms the floor with forward predictions. The
/// result is capped by `cand.remaining` and `token_cap`; 0 means the request
/// does not fit.
pub fn can_schedule<T: Scalar>(
    coeffs: &Coefficients<T>,
    base: &BatchShape,
    cand: Candidate,
    budget_ms: T,
    token_cap: u32,
) -> u32 {
    let limit = cand.remaining.min(token_cap);
    if limit == 0 {
        return 0;
    }
    let c = T::from_count(cand.context as u64);
    let current = if base.is_empty() {
        coeffs.a_const
    } else {
        coeffs.predict(base)
    };
    let a = coeffs.a_quad;
    let b = coeffs.a_lin + coeffs.a_quad * c + coeffs.a_mem;
    let k = current + coeffs.a_mem * c - budget_ms;

    let estimate: f64 = if k > T::zero() {
        0.0
    } else if a <= T::zero() {
        if b <= T::zero() {
            limit as f64
        } else {
            (-k / b).to_f64_lossy().floor()
        }
    } else {
        // Rationalized positive root, stable when 4ak is small against b².
        let disc = (b * b - T::lit(4.0) * a * k).sqrt();
        let denom = b + disc;
        if denom <= T::zero() {
            limit as f64
        } else {
            (T::lit(2.0) * -k / denom).to_f64_lossy().floor()
        }
    };
    let mut p = if estimate.is_nan() {
        0
    } else {
        estimate.clamp(0.0, limit as f64) as u32
    };

    const MAX_CORRECTION: usize = 4;
    for _ in 0..MAX_CORRECTION {
        if p == 0 || fits(coeffs, base, p, cand.context, budget_ms) {
            break;
        }
        p -= 1;
    }
    if p > 0 && !fits(coeffs, base, p, cand.context, budget_ms) {
        return 0;
    }
    for _ in 0..MAX_CORRECTION {
        if p < limit && fits(coeffs, base, p + 1, cand.context, budget_ms) {
            p += 1;
        } else {
            break;
        }
    }
    p
}

/// Single-entry prefill size maximizing tokens per millisecond.
///
/// Throughput `P / (a_quad·P² + b·P + c)` with `c = a_mem·C + a_const` peaks at
/// `P* = √(c / a_quad)`; the floor and ceiling of `P*` are compared against the
/// endpoints `1` and `cap`, ties going to the larger size.
pub fn max_throughput_tokens<T: Scalar>(coeffs: &Coefficients<T>, context: u32, cap: u32) -> u32 {
    let cap = cap.max(1);
    let c = coeffs.a_mem * T::from_count(context as u64) + coeffs.a_const;
    let mut candidates = vec![1, cap];
    if coeffs.a_quad > T::zero() && c > T::zero() {
        let star = (c / coeffs.a_quad).sqrt().to_f64_lossy();
        if star.is_finite() {
            let lo = star.floor().clamp(1.0, cap as f64) as u32;
            let hi = star.ceil().clamp(1.0, cap as f64) as u32;
            candidates.extend([lo, hi]);
        }
    }
    let throughput = |p: u32| -> f64 {
        let lat = coeffs
            .predict(&BatchShape::single(p, context))
            .to_f64_lossy();
        if lat <= 0.0 {
            f64::INFINITY
        } else {
            p as f64 / lat
        }
    };
    let mut best = 1;
    let mut best_tput = throughput(1);
    for p in candidates {
        let t = throughput(p);
        if t > best_tput || (t == best_tput && p > best) {
            best = p;
            best_tput = t;
        }
    }
    best
}

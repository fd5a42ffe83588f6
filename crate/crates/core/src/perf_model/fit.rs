use serde::{Deserialize, Serialize};

use super::{BatchShape, Coefficients};
use crate::error::{Error, Result};
use crate::metrics::percentile_nearest_rank;
use crate::scalar::Scalar;

/// One profiled single-request iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T> {
    pub p: u32,
    pub c: u32,
    pub latency_ms: T,
}

/// Profiler output: `{ "grid": [[P, C, ms], ...], "coeffs": {...}, "fit_error_p99": ... }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub grid: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Coefficients<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error_p99: Option<f64>,
}

impl ProfileDocument {
    pub fn from_samples(samples: &[Sample<f64>]) -> Self {
        ProfileDocument {
            grid: samples
                .iter()
                .map(|s| [s.p as f64, s.c as f64, s.latency_ms])
                .collect(),
            coeffs: None,
            fit_error_p99: None,
        }
    }

    pub fn samples(&self) -> Result<Vec<Sample<f64>>> {
        self.grid
            .iter()
            .map(|&[p, c, ms]| {
                if p < 1.0 || c < 0.0 || p.fract() != 0.0 || c.fract() != 0.0 || !ms.is_finite() {
                    return Err(Error::Config(format!(
                        "bad profile sample [{p}, {c}, {ms}]"
                    )));
                }
                Ok(Sample {
                    p: p as u32,
                    c: c as u32,
                    latency_ms: ms,
                })
            })
            .collect()
    }
}

const BASIS: usize = 4;

fn design_row<T: Scalar>(s: &Sample<T>) -> [T; BASIS] {
    let p = s.p as u64;
    let c = s.c as u64;
    [
        T::from_count(p),
        T::from_count(p * (p + c)),
        T::from_count(p + c),
        T::one(),
    ]
}

/// Least squares on the selected columns by Householder QR with column
/// equilibration. `None` when the selected columns are numerically dependent.
fn lstsq<T: Scalar>(rows: &[[T; BASIS]], y: &[T], cols: &[usize]) -> Option<(Vec<T>, T)> {
    let m = rows.len();
    let n = cols.len();
    if n == 0 {
        let ssr = y.iter().map(|v| *v * *v).sum();
        return Some((Vec::new(), ssr));
    }
    if m < n {
        return None;
    }
    // Column-major copy, each column scaled to unit max-norm.
    let mut a: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for &j in cols {
        let col: Vec<T> = rows.iter().map(|r| r[j]).collect();
        let mx = col.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
        if mx == T::zero() {
            return None;
        }
        scale.push(mx);
        a.push(col.into_iter().map(|v| v / mx).collect());
    }
    let mut b = y.to_vec();
    let mut diag = vec![T::zero(); n];

    for k in 0..n {
        let norm = a[k][k..].iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm == T::zero() {
            return None;
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] = v[0] - alpha;
        let vtv: T = v.iter().map(|x| *x * *x).sum();
        diag[k] = alpha;
        if vtv == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for col in a.iter_mut().skip(k) {
            let dot: T = v.iter().zip(&col[k..]).map(|(x, y)| *x * *y).sum();
            let f = two * dot / vtv;
            for (x, y) in v.iter().zip(col[k..].iter_mut()) {
                *y = *y - f * *x;
            }
        }
        let dot: T = v.iter().zip(&b[k..]).map(|(x, y)| *x * *y).sum();
        let f = two * dot / vtv;
        for (x, y) in v.iter().zip(b[k..].iter_mut()) {
            *y = *y - f * *x;
        }
    }

    let max_diag = diag.iter().fold(T::zero(), |acc, d| acc.max(d.abs()));
    let tol = T::epsilon().sqrt() * max_diag;
    if diag.iter().any(|d| d.abs() <= tol) {
        return None;
    }

    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for (j, xj) in x.iter().enumerate().skip(i + 1) {
            acc = acc - a[j][i] * *xj;
        }
        x[i] = acc / diag[i];
    }
    let ssr = b[n..].iter().map(|v| *v * *v).sum();
    Some((x.iter().zip(&scale).map(|(v, s)| *v / *s).collect(), ssr))
}

/// Fits latency coefficients over the basis `{P, P(P+C), P+C, 1}` by least
/// squares on relative residuals: each row is weighted by `1/latency`, so
/// the fit matches multiplicative measurement noise.
///
/// When the unconstrained solution has a negative coefficient the fit is
/// redone under non-negativity: every subset of the four basis columns is
/// solved and the feasible solution with the smallest residual wins.
pub fn fit<T: Scalar>(samples: &[Sample<T>]) -> Result<Coefficients<T>> {
    if samples.len() < BASIS {
        return Err(Error::InsufficientSamples(samples.len()));
    }
    if samples.iter().any(|s| !(s.latency_ms > T::zero())) {
        return Err(Error::Config("profiled latencies must be positive".into()));
    }
    let rows: Vec<[T; BASIS]> = samples
        .iter()
        .map(|s| design_row(s).map(|v| v / s.latency_ms))
        .collect();
    let y: Vec<T> = vec![T::one(); samples.len()];

    let all = [0, 1, 2, 3];
    let (x, _) = lstsq(&rows, &y, &all).ok_or(Error::DegenerateGrid)?;
    let to_coeffs = |cols: &[usize], x: &[T]| {
        let mut full = [T::zero(); BASIS];
        for (&j, v) in cols.iter().zip(x) {
            full[j] = *v;
        }
        Coefficients::new(full[0], full[1], full[2], full[3])
    };
    if x.iter().all(|v| *v >= T::zero()) {
        return Ok(to_coeffs(&all, &x));
    }

    let mut best: Option<(T, Coefficients<T>)> = None;
    for mask in 0u32..(1 << BASIS) {
        let cols: Vec<usize> = (0..BASIS).filter(|j| mask & (1 << j) != 0).collect();
        let Some((xs, ssr)) = lstsq(&rows, &y, &cols) else {
            continue;
        };
        if xs.iter().any(|v| *v < T::zero()) {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| ssr < *b) {
            best = Some((ssr, to_coeffs(&cols, &xs)));
        }
    }
    best.map(|(_, c)| c).ok_or(Error::DegenerateGrid)
}

/// |predicted − measured| / measured for every sample.
pub fn relative_errors<T: Scalar>(coeffs: &Coefficients<T>, samples: &[Sample<T>]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| {
            let pred = coeffs.predict(&BatchShape::single(s.p, s.c)).to_f64_lossy();
            let meas = s.latency_ms.to_f64_lossy();
            ((pred - meas) / meas).abs()
        })
        .collect()
}

pub fn fit_error_p99<T: Scalar>(coeffs: &Coefficients<T>, samples: &[Sample<T>]) -> f64 {
    let mut errs = relative_errors(coeffs, samples);
    percentile_nearest_rank(&mut errs, 0.99).unwrap_or(0.0)
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fit::Sample;
use super::{BatchPlan, BatchShape, Coefficients};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ground-truth iteration latency, standing in for GPU execution.
///
/// Terms: `k1` linear compute, `k2` attention, `k3` tensor-parallel
/// communication, `k4` KV memory access, `k5` per-iteration constant (all ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams<T> {
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub k4: T,
    pub k5: T,
    #[serde(default)]
    pub noise_cv: T,
}

impl<T: Scalar> OracleParams<T> {
    pub fn validate(&self) -> Result<()> {
        let ks = [self.k1, self.k2, self.k3, self.k4, self.k5];
        if ks.iter().any(|k| !(*k >= T::zero())) || !(self.noise_cv >= T::zero()) {
            return Err(Error::Config(
                "oracle coefficients must be non-negative".into(),
            ));
        }
        if [self.k1, self.k2, self.k4, self.k5]
            .iter()
            .all(|k| *k == T::zero())
        {
            return Err(Error::Config(
                "oracle has no compute, memory or constant cost".into(),
            ));
        }
        Ok(())
    }

    /// Latency in ms before noise.
    pub fn noise_free_latency(&self, shape: &BatchShape) -> T {
        if shape.is_empty() {
            return T::zero();
        }
        let p = T::from_count(shape.total_p);
        self.k1 * p
            + self.k2 * T::from_count(shape.attention)
            + self.k3 * p
            + self.k4 * T::from_count(shape.memory)
            + self.k5
    }

    /// The coefficients a noise-free fit recovers. `k1` and `k3` both scale
    /// with P and are only identifiable as a sum.
    pub fn identifiable(&self) -> Coefficients<T> {
        Coefficients::new(self.k1 + self.k3, self.k2, self.k4, self.k5)
    }
}

/// Multiplicative noise `max(1 + ε, 1e-3)` with `ε ~ N(0, cv)`, deterministic per seed.
pub fn noise_factor(cv: f64, seed: u64) -> f64 {
    if cv <= 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, cv).expect("finite cv").sample(&mut rng);
    (1.0 + eps).max(1e-3)
}

/// Ground-truth latency of `plan` in ms.
pub fn oracle_latency<T: Scalar>(
    params: &OracleParams<T>,
    plan: &BatchPlan,
    seed: u64,
) -> Result<T> {
    if plan.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let base = params.noise_free_latency(&plan.shape());
    Ok(base * T::lit(noise_factor(params.noise_cv.to_f64_lossy(), seed)))
}

/// Profiling grid: P ∈ {1, 16, 64, 256, 512, 1024, 2048, 4096} × C ∈ {0, 1K, 4K, 16K, 40K, 64K}.
pub fn default_grid() -> Vec<(u32, u32)> {
    const P: [u32; 8] = [1, 16, 64, 256, 512, 1024, 2048, 4096];
    const C: [u32; 6] = [0, 1024, 4096, 16384, 40960, 65536];
    P.iter()
        .flat_map(|&p| C.iter().map(move |&c| (p, c)))
        .collect()
}

/// Derives an independent stream seed from `(seed, i)`.
pub fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One single-entry measurement per grid point.
pub fn profile<T: Scalar>(
    params: &OracleParams<T>,
    grid: &[(u32, u32)],
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    grid.iter()
        .enumerate()
        .map(|(i, &(p, c))| {
            if p == 0 {
                return Err(Error::Config("profiling grid points need P >= 1".into()));
            }
            let base = params.noise_free_latency(&BatchShape::single(p, c));
            let noise = noise_factor(params.noise_cv.to_f64_lossy(), mix(seed, i as u64));
            Ok(Sample {
                p,
                c,
                latency_ms: base * T::lit(noise),
            })
        })
        .collect()
}

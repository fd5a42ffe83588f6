//! Synthetic load generation and JSONL trace replay.
//!
//! Trace lines look like `{"t":0.25,"class":"online","in":4096,"out":256}`.
//! Times are written with exactly six fractional digits, so a trace survives
//! save and load unchanged.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_model::mix;
use crate::time::SimTime;
use crate::types::{Request, RequestClass, RequestId};

/// Request lengths: fixed counts, or `(in, out)` pairs drawn jointly from a
/// CSV file of `in,out` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSpec {
    #[serde(default = "default_input")]
    pub input_tokens: u32,
    #[serde(default = "default_output")]
    pub output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths_file: Option<PathBuf>,
}

fn default_input() -> u32 {
    4096
}

fn default_output() -> u32 {
    256
}

impl Default for LengthSpec {
    fn default() -> Self {
        LengthSpec {
            input_tokens: default_input(),
            output_tokens: default_output(),
            lengths_file: None,
        }
    }
}

impl LengthSpec {
    pub fn fixed(input_tokens: u32, output_tokens: u32) -> Self {
        LengthSpec {
            input_tokens,
            output_tokens,
            lengths_file: None,
        }
    }

    pub fn sampler(&self, base_dir: Option<&Path>) -> Result<LengthSampler> {
        match &self.lengths_file {
            None => {
                if self.input_tokens == 0 || self.output_tokens == 0 {
                    return Err(Error::Config(
                        "input_tokens and output_tokens must be positive".into(),
                    ));
                }
                Ok(LengthSampler::Fixed(self.input_tokens, self.output_tokens))
            }
            Some(p) => {
                let path = match base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.clone(),
                };
                Ok(LengthSampler::Empirical(load_lengths(&path)?))
            }
        }
    }

    /// Mean tokens per request; reads the file for empirical lengths.
    pub fn mean_tokens(&self, base_dir: Option<&Path>) -> Result<f64> {
        Ok(match self.sampler(base_dir)? {
            LengthSampler::Fixed(i, o) => (i + o) as f64,
            LengthSampler::Empirical(pairs) => {
                pairs.iter().map(|&(i, o)| (i + o) as f64).sum::<f64>() / pairs.len() as f64
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LengthSampler {
    Fixed(u32, u32),
    Empirical(Vec<(u32, u32)>),
}

impl LengthSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> (u32, u32) {
        match self {
            LengthSampler::Fixed(i, o) => (*i, *o),
            LengthSampler::Empirical(pairs) => pairs[rng.random_range(0..pairs.len())],
        }
    }
}

/// Reads `in,out` rows. A non-numeric first line is taken as a header.
pub fn load_lengths(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => a.parse::<u32>().ok().zip(b.parse::<u32>().ok()),
            _ => None,
        };
        match parsed {
            Some((a, b)) if a > 0 && b > 0 => pairs.push((a, b)),
            None if i == 0 => continue,
            _ => {
                return Err(Error::Trace {
                    line: i + 1,
                    msg: format!("expected positive `in,out`, got `{line}`"),
                })
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "{} has no length rows",
            path.display()
        )));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSpec {
    /// Requests per second.
    pub rate: f64,
    pub cv: f64,
    /// Seconds.
    pub duration: f64,
    #[serde(flatten)]
    pub lengths: LengthSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineSpec {
    /// Requests available at time zero.
    pub backlog: u32,
    #[serde(flatten)]
    pub lengths: LengthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub online: OnlineSpec,
    #[serde(default)]
    pub offline: OfflineSpec,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let o = &self.online;
        if !(o.rate > 0.0 && o.rate.is_finite()) {
            return Err(Error::Config("online.rate must be positive".into()));
        }
        if !(o.cv > 0.0 && o.cv.is_finite()) {
            return Err(Error::Config("online.cv must be positive".into()));
        }
        if !(o.duration > 0.0 && o.duration.is_finite()) {
            return Err(Error::Config("online.duration must be positive".into()));
        }
        Ok(())
    }
}

/// One trace line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: SimTime,
    pub class: RequestClass,
    pub input: u32,
    pub output: u32,
}

impl TraceRecord {
    pub fn to_request(&self, id: RequestId) -> Request {
        Request::new(id, self.class, self.t, self.input, self.output)
    }
}

/// Arrival times in seconds of a Gamma renewal process with the given mean
/// rate and coefficient of variation of the gaps, truncated at `duration`.
pub fn gen_gamma_arrivals(rate: f64, cv: f64, duration: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && cv > 0.0 && duration > 0.0) {
        return Err(Error::Config(
            "rate, cv and duration must be positive".into(),
        ));
    }
    let shape = 1.0 / (cv * cv);
    let scale = 1.0 / (rate * shape);
    let gamma = Gamma::new(shape, scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gamma.sample(&mut rng);
        if t >= duration {
            return Ok(out);
        }
        out.push(t);
    }
}

const LENGTH_STREAM: u64 = 0x6c65_6e67;
const OFFLINE_STREAM: u64 = 0x6f66_666c;

/// Online arrivals plus the offline backlog, ordered by arrival time.
pub fn generate(spec: &WorkloadSpec, base_dir: Option<&Path>) -> Result<Vec<TraceRecord>> {
    spec.validate()?;
    let o = &spec.online;
    let arrivals = gen_gamma_arrivals(o.rate, o.cv, o.duration, spec.seed)?;
    let lengths = o.lengths.sampler(base_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, LENGTH_STREAM));
    let mut trace = offline_backlog(spec, base_dir)?.take(spec.offline.backlog as usize);
    for t in arrivals {
        let (input, output) = lengths.sample(&mut rng);
        // Rounded to the microsecond so the trace file is exact.
        let t = SimTime::from_us_f64((t * 1e6).round());
        trace.push(TraceRecord {
            t,
            class: RequestClass::Online,
            input,
            output,
        });
    }
    trace.sort_by_key(|r| r.t);
    Ok(trace)
}

/// Endless supply of offline requests arriving at `t`.
#[derive(Debug, Clone)]
pub struct OfflineSource {
    lengths: LengthSampler,
    rng: ChaCha8Rng,
}

impl OfflineSource {
    pub fn next_at(&mut self, t: SimTime) -> TraceRecord {
        let (input, output) = self.lengths.sample(&mut self.rng);
        TraceRecord {
            t,
            class: RequestClass::Offline,
            input,
            output,
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<TraceRecord> {
        (0..n).map(|_| self.next_at(SimTime::ZERO)).collect()
    }
}

pub fn offline_backlog(spec: &WorkloadSpec, base_dir: Option<&Path>) -> Result<OfflineSource> {
    Ok(OfflineSource {
        lengths: spec.offline.lengths.sampler(base_dir)?,
        rng: ChaCha8Rng::seed_from_u64(mix(spec.seed, OFFLINE_STREAM)),
    })
}

fn format_time(t: SimTime) -> String {
    let us = t.as_nanos() / 1000;
    format!("{}.{:06}", us / 1_000_000, us % 1_000_000)
}

pub fn write_trace(records: &[TraceRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        let class = match r.class {
            RequestClass::Online => "online",
            RequestClass::Offline => "offline",
        };
        writeln!(
            w,
            r#"{{"t":{},"class":"{}","in":{},"out":{}}}"#,
            format_time(r.t),
            class,
            r.input,
            r.output
        )?;
    }
    Ok(())
}

pub fn save_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_trace(records, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    t: f64,
    class: RequestClass,
    #[serde(rename = "in")]
    input: i64,
    #[serde(rename = "out")]
    output: i64,
}

pub fn read_trace(r: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: n,
            msg: e.to_string(),
        })?;
        if raw.input < 0 || raw.output < 0 {
            return Err(Error::Trace {
                line: n,
                msg: "negative token count".into(),
            });
        }
        if raw.input == 0
            || raw.output == 0
            || raw.input > u32::MAX as i64
            || raw.output > u32::MAX as i64
        {
            return Err(Error::Trace {
                line: n,
                msg: "token counts must be in 1..=u32::MAX".into(),
            });
        }
        if !(raw.t >= 0.0 && raw.t.is_finite()) {
            return Err(Error::Trace {
                line: n,
                msg: format!("bad arrival time {}", raw.t),
            });
        }
        out.push(TraceRecord {
            t: SimTime::from_us_f64((raw.t * 1e6).round()),
            class: raw.class,
            input: raw.input as u32,
            output: raw.output as u32,
        });
    }
    // Stable: ties keep file order.
    out.sort_by_key(|r| r.t);
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_trace(BufReader::new(fs::File::open(path)?))
}

/// Requests with ids in trace order.
pub fn to_requests(records: &[TraceRecord]) -> Vec<Request> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_request(RequestId(i as u32)))
        .collect()
}

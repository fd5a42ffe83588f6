use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use coserve::engine::{run_with_base, sweep, write_outputs, RunConfig, SweepAxis};
use coserve::perf_model::{default_grid, fit, fit_error_p99, profile, ProfileDocument};
use coserve::presets::{self, ModelPreset, Scenario};
use coserve::scheduler::SchedulerPolicy;
use coserve::workload::{generate, save_trace, LengthSpec, OfflineSpec, OnlineSpec, WorkloadSpec};
use coserve::{Error, OracleParams, SloConfig};

#[derive(Parser)]
#[command(
    name = "coserve",
    version,
    about = "Online/offline LLM co-serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Rate,
    SloScale,
    Cv,
    InLen,
    OutLen,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Rate => SweepAxis::Rate,
            Axis::SloScale => SweepAxis::SloScale,
            Axis::Cv => SweepAxis::Cv,
            Axis::InLen => SweepAxis::InLen,
            Axis::OutLen => SweepAxis::OutLen,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Profile the latency oracle on the default grid.
    Profile {
        /// JSON with oracle parameters, either bare or under an "oracle" key.
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit latency-model coefficients to profiled samples.
    Fit {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a Gamma-arrival online trace.
    GenTrace {
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0.5)]
        cv: f64,
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 4096)]
        in_tokens: u32,
        #[arg(long, default_value_t = 256)]
        out_tokens: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of (input, output) pairs to sample lengths from.
        #[arg(long)]
        lengths_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration per value of an axis and write the reports.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the calibrated model presets and scenario configs.
    Calibrate {
        #[arg(long, default_value = "configs")]
        out_dir: PathBuf,
        /// Online trace length of the scenario configs, in seconds.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Trace { .. } | Error::Io(_) | Error::Json(_)) => 2,
        Some(Error::Livelock { .. }) => 3,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Profile {
            model_config,
            out,
            seed,
        } => {
            let oracle = load_oracle(&model_config)?;
            let samples = profile(&oracle, &default_grid(), seed)?;
            write_json(&out, &ProfileDocument::from_samples(&samples))
        }
        Command::Fit { samples, out } => {
            let mut doc: ProfileDocument = read_json(&samples)?;
            let s = doc.samples()?;
            let coeffs = fit(&s)?;
            doc.fit_error_p99 = Some(fit_error_p99(&coeffs, &s));
            doc.coeffs = Some(coeffs);
            write_json(&out, &doc)
        }
        Command::GenTrace {
            rate,
            cv,
            duration,
            in_tokens,
            out_tokens,
            seed,
            lengths_file,
            out,
        } => {
            let lengths = LengthSpec {
                input_tokens: in_tokens,
                output_tokens: out_tokens,
                lengths_file,
            };
            let spec = WorkloadSpec {
                online: OnlineSpec {
                    rate,
                    cv,
                    duration,
                    lengths: lengths.clone(),
                },
                offline: OfflineSpec {
                    backlog: 0,
                    lengths,
                },
                seed,
            };
            spec.validate()?;
            let records = generate(&spec, None)?;
            save_trace(&records, &out)?;
            Ok(())
        }
        Command::Run { config, out } => {
            let cfg = RunConfig::from_json_file(&config)?;
            let result = run_with_base(&cfg, config.parent())?;
            write_outputs(&result, &out)?;
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = RunConfig::from_json_file(&config)?;
            let reports = sweep(&cfg, axis.into(), &values, config.parent())?;
            let rows: Vec<serde_json::Value> = values
                .iter()
                .zip(&reports)
                .map(|(v, r)| serde_json::json!({ "value": v, "report": r }))
                .collect();
            write_json(&out, &rows)
        }
        Command::Calibrate { out_dir, duration } => calibrate(&out_dir, duration),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| path.display().to_string())?;
    let v = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(v)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| path.display().to_string())?;
    Ok(())
}

fn load_oracle(path: &Path) -> anyhow::Result<OracleParams> {
    let mut v: serde_json::Value = read_json(path)?;
    if let Some(inner) = v.get_mut("oracle") {
        v = inner.take();
    }
    let oracle: OracleParams =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    oracle.validate()?;
    Ok(oracle)
}

fn calibrate(dir: &Path, duration: f64) -> anyhow::Result<()> {
    let models: [(&str, ModelPreset); 2] = [
        ("llama-3.1-8b", presets::llama8b()),
        ("llama-3.1-70b", presets::llama70b()),
    ];
    for (file, preset) in &models {
        write_json(&dir.join(format!("{file}.json")), preset)?;
    }

    let preset = &models[0].1;
    let sc = Scenario {
        duration,
        ..Scenario::default()
    };
    let placeholder = SloConfig::new(1.0, 0.1);
    let base = presets::scenario_config(
        preset,
        SchedulerPolicy::OnlineOnly { chunk_size: 2048 },
        placeholder,
        &sc,
    );
    let slo = presets::derive_slo(&base)?;
    let policies = [
        SchedulerPolicy::OnlineOnly { chunk_size: 2048 },
        SchedulerPolicy::SarathiPreemptive { chunk_size: 2048 },
        SchedulerPolicy::NonPreemptive { chunk_size: 2048 },
        SchedulerPolicy::ConServe,
    ];
    for policy in policies {
        let mut cfg = presets::scenario_config(preset, policy, slo, &sc);
        cfg.notes = Some(format!(
            "{}; SLO = P99 TTFT/TBT of the online-only run of this workload ({:.6} s, {:.6} s); written by `coserve calibrate`",
            preset.notes, slo.ttft_slo, slo.tbt_slo
        ));
        write_json(
            &dir.join(format!("scenario-8b-{}.json", policy.name())),
            &cfg,
        )?;
    }
    Ok(())
}

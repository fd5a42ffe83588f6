use std::path::Path;
use std::process::{Command, Output};

fn coserve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coserve"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Calibrated configs with a short online trace.
fn configs(dir: &Path) {
    let out = coserve(&["calibrate", "--out-dir", p(dir), "--duration", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    configs(dir.path());
    let outdir = dir.path().join("out");
    let out = coserve(&[
        "run",
        "--config",
        p(&dir.path().join("scenario-8b-conserve.json")),
        "--out",
        p(&outdir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "metrics.json",
        "events.jsonl",
        "requests.csv",
        "timeseries.csv",
    ] {
        assert!(outdir.join(f).is_file(), "{f}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(m["online_requests"].as_u64().unwrap() > 0);
}

#[test]
fn sweep_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    configs(dir.path());
    let dest = dir.path().join("sweep.json");
    let cfg = dir.path().join("scenario-8b-conserve.json");
    let out = coserve(&[
        "sweep",
        "--config",
        p(&cfg),
        "--axis",
        "slo-scale",
        "--values",
        "1,2",
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dest).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["value"], 2.0);
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let dest = dir.path().join("out");
    assert_eq!(
        code(&coserve(&[
            "run",
            "--config",
            p(&missing),
            "--out",
            p(&dest)
        ])),
        2
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"policy\": 3}").unwrap();
    assert_eq!(
        code(&coserve(&["run", "--config", p(&bad), "--out", p(&dest)])),
        2
    );

    let out = coserve(&[
        "gen-trace",
        "--rate",
        "-1",
        "--duration",
        "5",
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn livelock_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    configs(dir.path());
    let path = dir.path().join("scenario-8b-conserve.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["max_sim_time"] = serde_json::json!(0.5);
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = coserve(&[
        "run",
        "--config",
        p(&path),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn profile_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    configs(dir.path());
    let samples = dir.path().join("samples.json");
    let fitted = dir.path().join("fit.json");
    let model = dir.path().join("llama-3.1-8b.json");
    assert_eq!(
        code(&coserve(&[
            "profile",
            "--model-config",
            p(&model),
            "--out",
            p(&samples),
            "--seed",
            "3"
        ])),
        0
    );
    let out = coserve(&["fit", "--samples", p(&samples), "--out", p(&fitted)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fitted).unwrap()).unwrap();
    assert!(doc["fit_error_p99"].as_f64().unwrap() < 0.04);
    assert!(doc["coeffs"]["a_quad"].as_f64().unwrap() > 0.0);
}

#[test]
fn gen_trace_writes_online_lines() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("trace.jsonl");
    let out = coserve(&[
        "gen-trace",
        "--rate",
        "4",
        "--cv",
        "1",
        "--duration",
        "30",
        "--in-tokens",
        "512",
        "--out-tokens",
        "64",
        "--seed",
        "9",
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&dest).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() > 60 && lines.len() < 200, "{}", lines.len());
    let mut last = 0.0;
    for l in &lines {
        assert_eq!(l["class"], "online");
        assert_eq!(l["in"], 512);
        assert_eq!(l["out"], 64);
        let t = l["t"].as_f64().unwrap();
        assert!(t >= last && t < 30.0);
        last = t;
    }

    // Same seed, same trace.
    let again = dir.path().join("again.jsonl");
    coserve(&[
        "gen-trace",
        "--rate",
        "4",
        "--cv",
        "1",
        "--duration",
        "30",
        "--in-tokens",
        "512",
        "--out-tokens",
        "64",
        "--seed",
        "9",
        "--out",
        p(&again),
    ]);
    assert_eq!(text, std::fs::read_to_string(again).unwrap());
}

//! End-to-end command-line pipeline on a tiny synthetic run: synth -> train
//! -> forecast -> evaluate -> attention, plus contract errors.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ssdnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn ssdnet")
}

fn write_config(dir: &Path, encoder: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"
[dataset]
path = "{data}"
granularity = "1h"
steps_per_day = 8

[window]
t_l = 8
t_h = 8
train_stride = 2

[split]
val_steps = 48
test_steps = 48

[model]
encoder = "{encoder}"
d_hid = 8
n_layers = 1
d_kv = 4
n_heads = 2
dropout = 0.0
use_id_embedding = false
s = 8

[train]
learning_rate = 0.002
batch_size = 8
max_epochs = 4
patience = 4
loss_a = 0.5
seed = 5

[output]
dir = "{out}"

[synth]
n_series = 1
length = 400
period = 8
seasonal_amplitude = 1.0
noise_std = 0.05
seed = 12
granularity = "1h"

[synth.trend]
kind = "linear"
slope = 0.005
intercept = 0.0
"#,
        data = dir.join("data.csv").display(),
        out = dir.join(format!("run_{encoder}")).display(),
        encoder = encoder,
    );
    let path = dir.join(format!("{encoder}.toml"));
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "transformer");
    let cfg = cfg.to_str().unwrap();

    let out = run(&["synth", "--config", cfg]);
    assert!(out.status.success(), "synth: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data.csv").exists());

    let out = run(&["train", "--config", cfg]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("run_transformer");
    let ckpt = run_dir.join("checkpoint.ssdn");
    for artifact in ["checkpoint.ssdn", "training_log.csv", "run_manifest.json"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    let data = dir.path().join("data.csv");
    let fc_dir = dir.path().join("fc");
    let out = run(&[
        "forecast",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", fc_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "forecast: {}", String::from_utf8_lossy(&out.stderr));
    let decomp = std::fs::read_to_string(fc_dir.join("decomposition.csv")).unwrap();
    let mut lines = decomp.lines();
    assert_eq!(
        lines.next().unwrap(),
        "timestamp,mean,variance,q50,q90,trend,seasonality"
    );
    for line in lines {
        let v: Vec<&str> = line.split(',').collect();
        let mean: f64 = v[1].parse().unwrap();
        let variance: f64 = v[2].parse().unwrap();
        let q50: f64 = v[3].parse().unwrap();
        let trend: f64 = v[5].parse().unwrap();
        let seasonality: f64 = v[6].parse().unwrap();
        assert_eq!(q50, mean, "Gaussian median equals the mean");
        assert!(variance > 0.0);
        assert!((mean - trend - seasonality).abs() < 1e-9, "decomposition adds up");
    }
    let forecast: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fc_dir.join("forecast.json")).unwrap())
            .unwrap();
    assert_eq!(forecast.as_array().unwrap().len(), 8);

    let metrics_path = dir.path().join("metrics.json");
    let out = run(&[
        "evaluate",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", metrics_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "evaluate: {}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    for key in ["rho50", "rho90", "mae", "baseline_rho50", "baseline_rho90", "baseline_mae"] {
        assert!(metrics.get(key).is_some(), "metrics key {key}");
    }

    let att_dir = dir.path().join("att");
    let out = run(&[
        "attention",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", att_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "attention: {}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&att_dir).unwrap().collect();
    assert_eq!(files.len(), 2, "n_layers(1) x n_heads(2) attention files");
}

#[test]
fn evaluate_of_saved_bundle_matches_training_time_value() {
    // Re-running evaluate on the same checkpoint twice is value-identical.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "transformer");
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["synth", "--config", cfg]).status.success());
    assert!(run(&["train", "--config", cfg]).status.success());
    let ckpt = dir.path().join("run_transformer/checkpoint.ssdn");
    let data = dir.path().join("data.csv");
    let once = run(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let twice = run(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(once.status.success() && twice.status.success());
    assert_eq!(once.stdout, twice.stdout);
}

#[test]
fn lstm_bundle_refuses_attention_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lstm");
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["synth", "--config", cfg]).status.success());
    let out = run(&["train", "--config", cfg]);
    assert!(out.status.success(), "lstm train: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("run_lstm/checkpoint.ssdn");
    let data = dir.path().join("data.csv");
    let out = run(&[
        "attention",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", dir.path().join("att").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("no attention maps for lstm encoder"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn encoder_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "transformer");
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["synth", "--config", cfg]).status.success());
    let out = run(&["train", "--config", cfg, "--encoder", "lstm"]);
    assert!(out.status.success());
    let manifest = std::fs::read_to_string(
        dir.path().join("run_transformer/run_manifest.json"),
    )
    .unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(
        manifest["resolved_train_config"]["model"]["encoder"]["kind"],
        serde_json::json!("lstm")
    );
}

#[test]
fn invalid_config_key_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "transformer");
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("learning_rate = 0.002", "learning_rate = 0.002\nbogus_knob = 1");
    std::fs::write(&cfg_path, text).unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("bogus_knob"),
        "stderr should name the offending key: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn baseline_only_evaluation_works_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "transformer");
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["synth", "--config", cfg]).status.success());
    let data = dir.path().join("data.csv");
    let out = run(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--baseline-only",
        "--config", cfg,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics.get("baseline_rho50").is_some());
    assert!(metrics.get("rho50").is_none(), "no model metrics without a checkpoint");

    // Without --config the baseline cannot be computed.
    let out = run(&["evaluate", "--data", data.to_str().unwrap(), "--baseline-only"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_command_reports_and_filters() {
    let out = run(&["gradcheck", "--op", "softmax_last"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("softmax_last") && text.contains("PASS"));
    assert!(!text.contains("matmul"), "filter must restrict to one op");

    let out = run(&["gradcheck", "--op", "definitely_not_an_op"]);
    assert!(!out.status.success());
}

//! Batch CLI: data synthesis, training, forecasting, decomposition export,
//! evaluation, attention export and gradient checking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssdnet::checkpoint::{load_bundle, save_bundle};
use ssdnet::data::{
    apply_stats, chrono_split, load_csv, make_windows, normalize_holdout, persistence_forecast,
    synth_generate, write_csv, NormalizationStats, WindowSample,
};
use ssdnet::encoder::{export_attention, EncoderKind};
use ssdnet::error::{Error, Result};
use ssdnet::loss::MetricsAccumulator;
use ssdnet::model::model_grad_check;
use ssdnet::runconfig::RunConfig;
use ssdnet::tensor::primitive_checks;
use ssdnet::train::{decode_denormalized, evaluate, train, ModelBundle};

#[derive(Parser)]
#[command(name = "ssdnet", about = "State-space decomposition forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV with ground-truth components.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; defaults to the config's dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, training log and run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured encoder (ablation switch).
        #[arg(long, value_enum)]
        encoder: Option<EncoderArg>,
    },
    /// Forecast one test window: forecast JSON plus decomposition CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the non-overlapping test windows (default 0).
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile-loss metrics for the model and the persistence baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Compute only the persistence baseline (requires --config).
        #[arg(long)]
        baseline_only: bool,
        /// Run config supplying the dataset profile when no checkpoint is
        /// given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional metrics JSON output path (metrics always print to
        /// stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-layer/head attention CSVs for one test window.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks (all primitives + toy model).
    Gradcheck {
        /// Check a single primitive by name.
        #[arg(long)]
        op: Option<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EncoderArg {
    Transformer,
    Lstm,
}

impl From<EncoderArg> for EncoderKind {
    fn from(v: EncoderArg) -> Self {
        match v {
            EncoderArg::Transformer => EncoderKind::Transformer,
            EncoderArg::Lstm => EncoderKind::Lstm,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => cmd_synth(&config, out.as_deref()),
        Command::Train { config, encoder } => cmd_train(&config, encoder.map(Into::into)),
        Command::Forecast { checkpoint, data, window, out } => {
            cmd_forecast(&checkpoint, &data, window, &out)
        }
        Command::Evaluate { checkpoint, data, baseline_only, config, out } => {
            cmd_evaluate(checkpoint.as_deref(), &data, baseline_only, config.as_deref(), out.as_deref())
        }
        Command::Attention { checkpoint, data, window, out } => {
            cmd_attention(&checkpoint, &data, window, &out)
        }
        Command::Gradcheck { op } => cmd_gradcheck(op.as_deref()),
    }
}

fn cmd_synth(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let table = synth_generate(synth)?;
    let target = out.unwrap_or(&cfg.dataset.path);
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    write_csv(&table, target)?;
    println!(
        "wrote {} rows ({} series x {} steps) to {}",
        table.series.iter().map(|s| s.len()).sum::<usize>(),
        table.n_series(),
        synth.length,
        target.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, encoder_override: Option<EncoderKind>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let profile = cfg.profile();
    let table = load_csv(&cfg.dataset.path, profile.granularity)?;
    let holdout = profile.val_steps + profile.test_steps;
    let (normed, stats) = normalize_holdout(&table, holdout)?;
    let (train_t, val_t, _test_t) = chrono_split(&normed, profile.val_steps, profile.test_steps)?;
    let train_windows = make_windows(&train_t, profile.t_l, profile.t_h, profile.train_stride, &profile.calendar)?;
    let val_windows = make_windows(&val_t, profile.t_l, profile.t_h, profile.t_h, &profile.calendar)?;
    let train_cfg = cfg.to_train_config_for(table.n_series(), encoder_override);

    let (bundle, log) = train(&train_cfg, &train_windows, &val_windows, stats, profile)?;

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_bundle(&bundle, &dir.join("checkpoint.ssdn"))?;
    log.write_csv(&dir.join("training_log.csv"))?;
    let manifest = serde_json::json!({
        "run_config": cfg,
        "resolved_train_config": bundle.config,
        "seed": bundle.config.seed,
        "aborted": log.aborted,
    });
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let last = log.epochs.last();
    println!(
        "trained {} epochs; best artifacts in {} (final val loss {})",
        log.epochs.len(),
        dir.display(),
        last.map(|e| e.val_loss.to_string()).unwrap_or_default()
    );
    Ok(())
}

/// Test windows (non-overlapping horizons) exactly as the bundle's profile
/// dictates, built from a raw CSV normalized with the bundle's stats.
fn test_windows_for(bundle: &ModelBundle, data: &Path) -> Result<Vec<WindowSample>> {
    let table = load_csv(data, bundle.profile.granularity)?;
    let normed = apply_stats(&table, &bundle.stats)?;
    let (_, _, test_t) = chrono_split(&normed, bundle.profile.val_steps, bundle.profile.test_steps)?;
    make_windows(
        &test_t,
        bundle.profile.t_l,
        bundle.profile.t_h,
        bundle.profile.t_h,
        &bundle.profile.calendar,
    )
}

fn cmd_forecast(checkpoint: &Path, data: &Path, window_idx: usize, out: &Path) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    let table = load_csv(data, bundle.profile.granularity)?;
    let windows = test_windows_for(&bundle, data)?;
    let window = windows.get(window_idx).ok_or_else(|| {
        Error::Contract(format!(
            "window index {window_idx} out of range ({} test windows)",
            windows.len()
        ))
    })?;
    let path = decode_denormalized(&bundle, window)?;

    let series = &table.series[window.series_index];
    // Horizon step t sits at absolute position start + t_l + t of the test
    // segment, which begins val+test steps from the end of the full series.
    let test_offset = series.len() - bundle.profile.test_steps;
    let g = bundle.profile.granularity;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut records = Vec::new();
    let mut csv_body = String::from("timestamp,mean,variance,q50,q90,trend,seasonality\n");
    for t in 0..path.len() {
        let abs = test_offset + window.start + window.t_l() + t;
        let ts = series.timestamp(abs, g).format(ssdnet::data::TIMESTAMP_FMT).to_string();
        records.push(serde_json::json!({
            "timestamp": ts,
            "mean": path.means[t],
            "variance": path.variances[t],
            "q50": path.q50[t],
            "q90": path.q90[t],
            "trend": path.trends[t],
            "seasonality": path.seasonals[t],
        }));
        csv_body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            ts, path.means[t], path.variances[t], path.q50[t], path.q90[t], path.trends[t], path.seasonals[t]
        ));
    }
    let json_path = out.join("forecast.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&records).expect("records serialize"))
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let csv_path = out.join("decomposition.csv");
    std::fs::write(&csv_path, csv_body).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn baseline_metrics(
    windows: &[WindowSample],
    stats: Option<&[NormalizationStats]>,
    steps_per_day: usize,
) -> Result<ssdnet::loss::MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    for w in windows {
        let mut preds = persistence_forecast(w, steps_per_day)?;
        let mut targets = w.horizon_targets.clone();
        if let Some(stats) = stats {
            let st = stats[w.series_index];
            for v in preds.iter_mut().chain(targets.iter_mut()) {
                *v = st.invert(*v);
            }
        }
        acc.push_points(&w.series_id, &preds, &targets)?;
    }
    acc.finish()
}

fn cmd_evaluate(
    checkpoint: Option<&Path>,
    data: &Path,
    baseline_only: bool,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut result = serde_json::Map::new();
    let baseline = if baseline_only || checkpoint.is_none() {
        let cfg_path = config.ok_or_else(|| {
            Error::Config("--baseline-only requires --config for the dataset profile".into())
        })?;
        let cfg = RunConfig::load(cfg_path)?;
        let profile = cfg.profile();
        let table = load_csv(data, profile.granularity)?;
        let (_, _, test_t) = chrono_split(&table, profile.val_steps, profile.test_steps)?;
        let windows = make_windows(&test_t, profile.t_l, profile.t_h, profile.t_h, &profile.calendar)?;
        baseline_metrics(&windows, None, profile.steps_per_day)?
    } else {
        let bundle = load_bundle(checkpoint.unwrap())?;
        let windows = test_windows_for(&bundle, data)?;
        let report = evaluate(&bundle, &windows)?;
        let model_json = serde_json::to_value(&report).expect("report serializes");
        for (k, v) in model_json.as_object().unwrap() {
            result.insert(k.clone(), v.clone());
        }
        baseline_metrics(&windows, Some(&bundle.stats), bundle.profile.steps_per_day)?
    };
    result.insert("baseline_rho50".into(), baseline.rho50.into());
    result.insert("baseline_rho90".into(), baseline.rho90.into());
    result.insert("baseline_mae".into(), baseline.mae.into());

    let text = serde_json::to_string_pretty(&serde_json::Value::Object(result)).expect("metrics serialize");
    println!("{text}");
    if let Some(out) = out {
        std::fs::write(out, text).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    Ok(())
}

fn cmd_attention(checkpoint: &Path, data: &Path, window_idx: usize, out: &Path) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    if bundle.config.model.encoder.kind != EncoderKind::Transformer {
        return Err(Error::Contract("no attention maps for lstm encoder".into()));
    }
    let windows = test_windows_for(&bundle, data)?;
    let window = windows.get(window_idx).ok_or_else(|| {
        Error::Contract(format!(
            "window index {window_idx} out of range ({} test windows)",
            windows.len()
        ))
    })?;
    let (_, maps) = bundle.model.decode_forecast(window, true)?;
    let files = export_attention(&maps, out)?;
    println!("wrote {} attention maps to {}", files.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>) -> Result<()> {
    let mut failed = false;
    let checks = primitive_checks()?;
    for (name, err) in &checks {
        if let Some(filter) = op {
            if name != &filter {
                continue;
            }
        }
        let pass = *err < 1e-6;
        failed |= !pass;
        println!("{name}: max relative error {err:.3e} {}", if pass { "PASS" } else { "FAIL" });
    }
    if let Some(filter) = op {
        if !checks.iter().any(|(n, _)| n == &filter) {
            return Err(Error::Config(format!("unknown primitive {filter}")));
        }
    } else {
        // End-to-end check on the toy configuration.
        let err = toy_model_grad_check()?;
        let pass = err < 1e-4;
        failed |= !pass;
        println!("toy_model: max relative error {err:.3e} {}", if pass { "PASS" } else { "FAIL" });
    }
    if failed {
        return Err(Error::Numeric("gradient check failed".into()));
    }
    println!("PASS");
    Ok(())
}

fn toy_model_grad_check() -> Result<f64> {
    use ssdnet::data::{SynthConfig, TrendKind};
    use ssdnet::encoder::EncoderConfig;
    use ssdnet::loss::LossConfig;
    use ssdnet::model::{ModelConfig, SsdNet};

    let synth = SynthConfig {
        n_series: 1,
        length: 40,
        period: 3,
        trend: TrendKind::Linear { slope: 0.05, intercept: 0.0 },
        seasonal_amplitude: 1.0,
        noise_std: 0.05,
        seed: 11,
        granularity: ssdnet::data::Granularity::Hour,
    };
    let table = synth_generate(&synth)?;
    let (normed, _) = ssdnet::data::normalize(&table, 40)?;
    let windows = make_windows(&normed, 6, 3, 1, &[])?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::Transformer,
            d_hid: 4,
            n_layers: 1,
            d_kv: 4,
            n_heads: 1,
            dropout: 0.0,
            t_l: 6,
            t_h: 3,
            use_id_embedding: false,
            n_series: 1,
        },
        s: 3,
    };
    let mut model = SsdNet::new(config, windows[0].cov_width, 7)?;
    model_grad_check(&mut model, &windows[0], &LossConfig { a: 0.5 })
}

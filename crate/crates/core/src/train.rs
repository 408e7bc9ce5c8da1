//! Training loop: Adam over teacher-forced mini-batches, per-epoch
//! validation, early stopping on the best validation loss, autoregressive
//! evaluation against test windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_components, NormalizationStats, WindowSample};
use crate::error::{Error, Result};
use crate::loss::{composite_loss_nodes, LossConfig, MetricsAccumulator, MetricsReport};
use crate::model::{read_path, ModelConfig, SsdNet};
use crate::params::{Adam, ParamBinding};
use crate::ssm::ForecastPath;
use crate::tensor::Graph;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trained model plus everything needed to reproduce its forecasts.
pub struct ModelBundle {
    pub model: SsdNet,
    pub stats: Vec<NormalizationStats>,
    pub config: TrainConfig,
    pub profile: crate::data::DatasetProfile,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: bool,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut body = String::from("epoch,train_loss,val_loss,wall_ms\n");
        for e in &self.epochs {
            body.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.wall_ms
            ));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Teacher-forced batch loss and per-sample forecast paths (eval mode; no
/// parameter updates). Used for validation and exposed for inspection.
pub fn forward_train(
    model: &SsdNet,
    batch: &[WindowSample],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<ForecastPath>)> {
    if batch.is_empty() {
        return Err(Error::Contract("forward_train: empty batch".into()));
    }
    let mut total = 0.0;
    let mut paths = Vec::with_capacity(batch.len());
    for window in batch {
        let mut g = Graph::eval();
        let mut binding = ParamBinding::new();
        let nodes = model.build_forward(&mut g, &mut binding, window, &window.lagged, false)?;
        let loss =
            composite_loss_nodes(&mut g, &nodes.means, &nodes.variances, &window.horizon_targets, loss_cfg)?;
        total += g.value(loss).item()?;
        paths.push(read_path(&g, &nodes)?);
    }
    Ok((total / batch.len() as f64, paths))
}

/// One optimization step over a mini-batch: per-sample tapes, accumulated
/// gradients scaled by 1/batch, then a single Adam update.
fn train_batch(
    model: &mut SsdNet,
    batch: &[WindowSample],
    loss_cfg: &LossConfig,
    adam: &mut Adam,
    dropout_seed: u64,
) -> Result<f64> {
    model.params.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, window) in batch.iter().enumerate() {
        let mut g = Graph::new(dropout_seed.wrapping_add(i as u64));
        let mut binding = ParamBinding::new();
        let nodes = model.build_forward(&mut g, &mut binding, window, &window.lagged, false)?;
        let loss =
            composite_loss_nodes(&mut g, &nodes.means, &nodes.variances, &window.horizon_targets, loss_cfg)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value}")));
        }
        total += value;
        g.backward(loss)?;
        binding.collect(&g, &mut model.params, scale);
    }
    adam.step(&mut model.params);
    Ok(total * scale)
}

/// Runs mini-batch Adam with early stopping; returns the weights achieving
/// the minimum validation loss together with the per-epoch log.
pub fn train(
    config: &TrainConfig,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    stats: Vec<NormalizationStats>,
    profile: crate::data::DatasetProfile,
) -> Result<(ModelBundle, TrainingLog)> {
    config.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Contract("train: empty split".into()));
    }
    let n_cov = train_windows[0].cov_width;
    let mut model = SsdNet::new(config.model.clone(), n_cov, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);

    let mut log = TrainingLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = model.params.snapshot();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    'epochs: for epoch in 1..=config.max_epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<WindowSample> =
                chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let seed = config
                .seed
                .wrapping_mul(0x9e37_79b9)
                .wrapping_add((epoch as u64) << 20)
                .wrapping_add(bi as u64);
            match train_batch(&mut model, &batch, &config.loss, &mut adam, seed) {
                Ok(l) => {
                    epoch_loss += l;
                    batches += 1;
                }
                Err(Error::Numeric(msg)) => {
                    eprintln!("epoch {epoch}: aborting on divergence: {msg}");
                    log.aborted = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let (val_loss, _) = forward_train(&model, val_windows, &config.loss)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = model.params.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    model.params.restore(&best_snapshot);
    Ok((
        ModelBundle {
            model,
            stats,
            config: config.clone(),
            profile,
        },
        log,
    ))
}

/// Decodes every test window autoregressively and aggregates the quantile
/// metrics in denormalized units.
pub fn evaluate(bundle: &ModelBundle, test_windows: &[WindowSample]) -> Result<MetricsReport> {
    if test_windows.is_empty() {
        return Err(Error::Contract("evaluate: empty test set".into()));
    }
    let mut acc = MetricsAccumulator::new();
    for window in test_windows {
        let path = decode_denormalized(bundle, window)?;
        let stats = bundle.stats[window.series_index];
        let targets: Vec<f64> = window.horizon_targets.iter().map(|&z| stats.invert(z)).collect();
        acc.push_path(&window.series_id, &path, &targets)?;
    }
    acc.finish()
}

/// Autoregressive forecast for one window, mapped back to original units.
pub fn decode_denormalized(bundle: &ModelBundle, window: &WindowSample) -> Result<ForecastPath> {
    let (path, _) = bundle.model.decode_forecast(window, false)?;
    Ok(denormalize_components(&path, &bundle.stats[window.series_index]))
}

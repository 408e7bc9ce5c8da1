//! TOML run configuration for the batch CLI. Unknown keys are rejected so a
//! typo never silently falls back to a default.

use serde::{Deserialize, Serialize};

use crate::data::{
    default_calendar_profile, CalendarFeature, DatasetProfile, Granularity, SynthConfig,
};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: std::path::PathBuf,
    pub granularity: Granularity,
    /// Calendar feature set; defaults per granularity when omitted.
    #[serde(default)]
    pub calendar: Option<Vec<CalendarFeature>>,
    pub steps_per_day: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub t_l: usize,
    pub t_h: usize,
    #[serde(default = "one")]
    pub train_stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub val_steps: usize,
    pub test_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub d_hid: usize,
    pub n_layers: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub use_id_embedding: bool,
    /// Seasonality period of the state-space decoder.
    pub s: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_a")]
    pub loss_a: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    10
}

fn default_a() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: std::path::PathBuf,
}

/// Full run configuration; one file per run, fully resolved into the run
/// manifest for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub window: WindowSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config(None)?.validate()?;
        self.profile().validate()?;
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        Ok(())
    }

    pub fn calendar(&self) -> Vec<CalendarFeature> {
        self.dataset
            .calendar
            .clone()
            .unwrap_or_else(|| default_calendar_profile(self.dataset.granularity))
    }

    pub fn profile(&self) -> DatasetProfile {
        DatasetProfile {
            granularity: self.dataset.granularity,
            calendar: self.calendar(),
            steps_per_day: self.dataset.steps_per_day,
            t_l: self.window.t_l,
            t_h: self.window.t_h,
            val_steps: self.split.val_steps,
            test_steps: self.split.test_steps,
            train_stride: self.window.train_stride,
        }
    }

    /// Resolves the nested sections into a [`TrainConfig`]; `n_series` is
    /// known only after the dataset is loaded. `encoder_override` supports
    /// the ablation switch on the command line.
    pub fn to_train_config_for(
        &self,
        n_series: usize,
        encoder_override: Option<EncoderKind>,
    ) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    kind: encoder_override.unwrap_or(self.model.encoder),
                    d_hid: self.model.d_hid,
                    n_layers: self.model.n_layers,
                    d_kv: self.model.d_kv,
                    n_heads: self.model.n_heads,
                    dropout: self.model.dropout,
                    t_l: self.window.t_l,
                    t_h: self.window.t_h,
                    use_id_embedding: self.model.use_id_embedding,
                    n_series: n_series.max(1),
                },
                s: self.model.s,
            },
            loss: LossConfig { a: self.train.loss_a },
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.train.seed,
        }
    }

    fn to_train_config(&self, encoder_override: Option<EncoderKind>) -> Result<TrainConfig> {
        Ok(self.to_train_config_for(1, encoder_override))
    }
}

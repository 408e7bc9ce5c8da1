//! Composite training loss (weighted Gaussian NLL plus MAE) and the
//! normalized rho-quantile evaluation metrics.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ssm::ForecastPath;
use crate::tensor::{Graph, NodeId};

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the NLL term; 0 reduces the loss to plain MAE.
    #[serde(default = "default_a")]
    pub a: f64,
}

fn default_a() -> f64 {
    0.5
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { a: default_a() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a < 0.0 {
            return Err(Error::Config(format!(
                "loss weight a must be non-negative, got {}",
                self.a
            )));
        }
        Ok(())
    }
}

/// loss = a * NLL + MAE over one horizon, as plain floats.
pub fn composite_loss(
    means: &[f64],
    variances: &[f64],
    targets: &[f64],
    config: &LossConfig,
) -> Result<f64> {
    let t_h = targets.len();
    if means.len() != t_h || variances.len() != t_h {
        return Err(Error::Contract(format!(
            "composite_loss: lengths {}/{}/{}",
            means.len(),
            variances.len(),
            t_h
        )));
    }
    if let Some(&bad) = variances.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Contract(format!(
            "composite_loss: non-positive variance {bad}"
        )));
    }
    let mut log_sum = 0.0;
    let mut quad_sum = 0.0;
    let mut abs_sum = 0.0;
    for t in 0..t_h {
        let d = targets[t] - means[t];
        log_sum += variances[t].ln();
        quad_sum += d * d / variances[t];
        abs_sum += d.abs();
    }
    let th = t_h as f64;
    let nll = (th * TAU.ln() + log_sum + quad_sum) / (2.0 * th);
    Ok(config.a * nll + abs_sum / th)
}

/// Same loss built on the tape so it is differentiable through the mean
/// and variance nodes. `means` and `variances` are per-step scalar nodes.
pub fn composite_loss_nodes(
    g: &mut Graph,
    means: &[NodeId],
    variances: &[NodeId],
    targets: &[f64],
    config: &LossConfig,
) -> Result<NodeId> {
    let t_h = targets.len();
    if means.len() != t_h || variances.len() != t_h {
        return Err(Error::Contract(format!(
            "composite_loss: lengths {}/{}/{}",
            means.len(),
            variances.len(),
            t_h
        )));
    }
    for &v in variances {
        if g.value(v).item()? <= 0.0 {
            return Err(Error::Contract("composite_loss: non-positive variance".into()));
        }
    }
    let th = t_h as f64;
    let mut nll_acc: Option<NodeId> = None;
    let mut mae_acc: Option<NodeId> = None;
    for t in 0..t_h {
        let y = g.leaf(crate::tensor::Tensor::scalar(targets[t]));
        // Suffix broadcasting: the [1,1] mean on the left, scalar target on
        // the right. The difference only ever enters squared or absolute.
        let d = g.sub(means[t], y)?;
        let sq = g.mul(d, d)?;
        let quad = g.div(sq, variances[t])?;
        let lv = g.log(variances[t])?;
        let step_nll = g.add(lv, quad)?;
        nll_acc = Some(match nll_acc {
            Some(acc) => g.add(acc, step_nll)?,
            None => step_nll,
        });
        let ad = g.abs(d)?;
        mae_acc = Some(match mae_acc {
            Some(acc) => g.add(acc, ad)?,
            None => ad,
        });
    }
    let nll = g.add_scalar(nll_acc.unwrap(), th * TAU.ln())?;
    let nll = g.scale(nll, 1.0 / (2.0 * th))?;
    let mae = g.scale(mae_acc.unwrap(), 1.0 / th)?;
    let weighted = g.scale(nll, config.a)?;
    g.add(weighted, mae)
}

/// Pinball deviation: rho*(y - yhat) above the prediction, (1-rho)*(yhat - y)
/// at or below it. Non-negative, zero iff y == yhat.
pub fn pinball(y: f64, yhat: f64, rho: f64) -> f64 {
    if y > yhat {
        rho * (y - yhat)
    } else {
        (1.0 - rho) * (yhat - y)
    }
}

/// Normalized rho-quantile loss: 2 * sum(pinball) / sum(|y|).
pub fn quantile_loss(targets: &[f64], predictions: &[f64], rho: f64) -> Result<f64> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::Contract(format!("rho {rho} outside (0,1)")));
    }
    if targets.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "quantile_loss: {} targets vs {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    let denom: f64 = targets.iter().map(|y| y.abs()).sum();
    if denom == 0.0 {
        return Err(Error::Contract(
            "quantile_loss: all-zero targets give an undefined denominator".into(),
        ));
    }
    let num: f64 = targets
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| pinball(y, p, rho))
        .sum();
    Ok(2.0 * num / denom)
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SeriesMetrics {
    pub rho50: f64,
    pub rho90: f64,
    pub mae: f64,
}

/// Evaluation metrics; serializes to a flat JSON object of named floats
/// (per-series entries become `series_<id>_rho50` etc.).
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rho50: f64,
    pub rho90: f64,
    pub mae: f64,
    pub per_series: BTreeMap<String, SeriesMetrics>,
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("rho50", &self.rho50)?;
        map.serialize_entry("rho90", &self.rho90)?;
        map.serialize_entry("mae", &self.mae)?;
        for (id, m) in &self.per_series {
            map.serialize_entry(&format!("series_{id}_rho50"), &m.rho50)?;
            map.serialize_entry(&format!("series_{id}_rho90"), &m.rho90)?;
            map.serialize_entry(&format!("series_{id}_mae"), &m.mae)?;
        }
        map.end()
    }
}

/// Accumulates (target, q50, q90) triples across horizons and computes the
/// aggregate and per-series metrics in one pass at the end.
#[derive(Debug, Default)]
pub struct MetricsAccumulator {
    targets: Vec<f64>,
    q50: Vec<f64>,
    q90: Vec<f64>,
    series: Vec<String>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_path(&mut self, series_id: &str, path: &ForecastPath, targets: &[f64]) -> Result<()> {
        if path.len() != targets.len() {
            return Err(Error::Contract(format!(
                "metrics: path length {} vs {} targets",
                path.len(),
                targets.len()
            )));
        }
        for t in 0..targets.len() {
            self.targets.push(targets[t]);
            self.q50.push(path.q50[t]);
            self.q90.push(path.q90[t]);
            self.series.push(series_id.to_string());
        }
        Ok(())
    }

    /// Point forecasts only (e.g. the persistence baseline): q90 falls back
    /// to the point value.
    pub fn push_points(&mut self, series_id: &str, predictions: &[f64], targets: &[f64]) -> Result<()> {
        if predictions.len() != targets.len() {
            return Err(Error::Contract(format!(
                "metrics: {} predictions vs {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        for t in 0..targets.len() {
            self.targets.push(targets[t]);
            self.q50.push(predictions[t]);
            self.q90.push(predictions[t]);
            self.series.push(series_id.to_string());
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.targets.is_empty() {
            return Err(Error::Contract("metrics: nothing accumulated".into()));
        }
        let mut report = MetricsReport {
            rho50: quantile_loss(&self.targets, &self.q50, 0.5)?,
            rho90: quantile_loss(&self.targets, &self.q90, 0.9)?,
            mae: self
                .targets
                .iter()
                .zip(&self.q50)
                .map(|(&y, &p)| (y - p).abs())
                .sum::<f64>()
                / self.targets.len() as f64,
            per_series: BTreeMap::new(),
        };
        let mut ids: Vec<&String> = self.series.iter().collect();
        ids.sort();
        ids.dedup();
        if ids.len() > 1 {
            for id in ids {
                let idx: Vec<usize> = (0..self.series.len())
                    .filter(|&i| &self.series[i] == id)
                    .collect();
                let y: Vec<f64> = idx.iter().map(|&i| self.targets[i]).collect();
                let p50: Vec<f64> = idx.iter().map(|&i| self.q50[i]).collect();
                let p90: Vec<f64> = idx.iter().map(|&i| self.q90[i]).collect();
                report.per_series.insert(
                    id.clone(),
                    SeriesMetrics {
                        rho50: quantile_loss(&y, &p50, 0.5)?,
                        rho90: quantile_loss(&y, &p90, 0.9)?,
                        mae: y
                            .iter()
                            .zip(&p50)
                            .map(|(&yv, &pv)| (yv - pv).abs())
                            .sum::<f64>()
                            / y.len() as f64,
                    },
                );
            }
        }
        Ok(report)
    }
}

/// Metrics for one forecast path against its targets (both already in
/// original, denormalized units).
pub fn evaluate_forecast(path: &ForecastPath, targets: &[f64]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.push_path("0", path, targets)?;
    acc.finish()
}

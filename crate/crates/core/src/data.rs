//! Dataset ingestion, normalization, calendar covariates, windowing,
//! chronological splits, synthetic generation and the persistence baseline.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::ForecastPath;

pub const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "30min")]
    Min30,
    #[serde(rename = "1h")]
    Hour,
    #[serde(rename = "1day")]
    Day,
}

impl Granularity {
    pub fn step(&self) -> chrono::Duration {
        match self {
            Granularity::Min30 => chrono::Duration::minutes(30),
            Granularity::Hour => chrono::Duration::hours(1),
            Granularity::Day => chrono::Duration::days(1),
        }
    }
}

/// One ingested series: uniformly spaced values plus per-step covariate
/// rows, and optional ground-truth components from the synthetic generator.
#[derive(Debug, Clone)]
pub struct Series {
    pub id: String,
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
    /// Row-major, len = values.len() * cov_width.
    pub covariates: Vec<f64>,
    pub cov_width: usize,
    pub truth_trend: Option<Vec<f64>>,
    pub truth_seasonal: Option<Vec<f64>>,
    pub truth_noise: Option<Vec<f64>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, idx: usize, g: Granularity) -> NaiveDateTime {
        self.start + g.step() * idx as i32
    }
}

#[derive(Debug, Clone)]
pub struct TimeSeriesTable {
    pub series: Vec<Series>,
    pub granularity: Granularity,
    pub cov_names: Vec<String>,
}

impl TimeSeriesTable {
    pub fn n_series(&self) -> usize {
        self.series.len()
    }
}

/// Per-series z-score statistics, computed on the training segment only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// How a dataset is consumed: spacing, calendar feature set, day length in
/// steps, window geometry and split spans. Stored in checkpoints so a saved
/// model can rebuild compatible windows from a raw CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProfile {
    pub granularity: Granularity,
    pub calendar: Vec<CalendarFeature>,
    pub steps_per_day: usize,
    pub t_l: usize,
    pub t_h: usize,
    pub val_steps: usize,
    pub test_steps: usize,
    #[serde(default = "default_stride")]
    pub train_stride: usize,
}

fn default_stride() -> usize {
    1
}

impl DatasetProfile {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 || self.t_l == 0 || self.t_h == 0 || self.train_stride == 0 {
            return Err(Error::Config(
                "profile extents (steps_per_day, t_l, t_h, train_stride) must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Re-applies previously computed statistics (e.g. from a checkpoint) to a
/// freshly loaded table.
pub fn apply_stats(table: &TimeSeriesTable, stats: &[NormalizationStats]) -> Result<TimeSeriesTable> {
    if stats.len() != table.series.len() {
        return Err(Error::Contract(format!(
            "apply_stats: {} stats for {} series",
            stats.len(),
            table.series.len()
        )));
    }
    let mut out = table.clone();
    for (s, st) in out.series.iter_mut().zip(stats) {
        for v in &mut s.values {
            *v = st.apply(*v);
        }
    }
    Ok(out)
}

const TRUTH_COLS: [&str; 3] = ["truth_trend", "truth_seasonal", "truth_noise"];

/// Loads the CSV schema `timestamp,series_id,value[,covariates...]`.
/// Timestamps must be uniformly spaced per series; gaps and duplicates are
/// rejected. Columns named `truth_*` are stored as ground-truth components.
pub fn load_csv(path: &std::path::Path, granularity: Granularity) -> Result<TimeSeriesTable> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 3 || &headers[0] != "timestamp" || &headers[1] != "series_id" || &headers[2] != "value" {
        return Err(Error::Data(format!(
            "{}: expected header timestamp,series_id,value[,covariates...]",
            path.display()
        )));
    }
    let extra: Vec<String> = headers.iter().skip(3).map(|s| s.to_string()).collect();
    let truth_idx: Vec<Option<usize>> = TRUTH_COLS
        .iter()
        .map(|c| extra.iter().position(|e| e == c))
        .collect();
    let cov_names: Vec<String> = extra
        .iter()
        .filter(|e| !TRUTH_COLS.contains(&e.as_str()))
        .cloned()
        .collect();
    let cov_cols: Vec<usize> = extra
        .iter()
        .enumerate()
        .filter(|(_, e)| !TRUTH_COLS.contains(&e.as_str()))
        .map(|(i, _)| i)
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut rows: std::collections::HashMap<String, Vec<(NaiveDateTime, f64, Vec<f64>, Vec<f64>)>> =
        std::collections::HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let ts = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FMT)
            .map_err(|e| Error::Data(format!("row {}: bad timestamp {:?}: {e}", line + 2, &record[0])))?;
        let id = record[1].to_string();
        let value: f64 = record[2]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: non-numeric value {:?}", line + 2, &record[2])))?;
        let extras: Vec<f64> = (3..record.len())
            .map(|i| {
                record[i].parse().map_err(|_| {
                    Error::Data(format!("row {}: non-numeric column {:?}", line + 2, &record[i]))
                })
            })
            .collect::<Result<_>>()?;
        let covs: Vec<f64> = cov_cols.iter().map(|&i| extras[i]).collect();
        let truths: Vec<f64> = truth_idx
            .iter()
            .map(|o| o.map(|i| extras[i]).unwrap_or(f64::NAN))
            .collect();
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((ts, value, covs, truths));
    }

    let has_truth = truth_idx.iter().all(|o| o.is_some());
    let mut series = Vec::new();
    for id in order {
        let mut recs = rows.remove(&id).unwrap();
        recs.sort_by_key(|r| r.0);
        let step = granularity.step();
        for w in recs.windows(2) {
            let gap = w[1].0 - w[0].0;
            if gap == chrono::Duration::zero() {
                return Err(Error::Data(format!(
                    "series {id}: duplicate timestamp {}",
                    w[0].0.format(TIMESTAMP_FMT)
                )));
            }
            if gap != step {
                return Err(Error::Data(format!(
                    "series {id}: gap between {} and {}",
                    w[0].0.format(TIMESTAMP_FMT),
                    w[1].0.format(TIMESTAMP_FMT)
                )));
            }
        }
        let start = recs[0].0;
        let values: Vec<f64> = recs.iter().map(|r| r.1).collect();
        let covariates: Vec<f64> = recs.iter().flat_map(|r| r.2.clone()).collect();
        let (tt, tsn, tn) = if has_truth {
            (
                Some(recs.iter().map(|r| r.3[0]).collect()),
                Some(recs.iter().map(|r| r.3[1]).collect()),
                Some(recs.iter().map(|r| r.3[2]).collect()),
            )
        } else {
            (None, None, None)
        };
        series.push(Series {
            id,
            start,
            values,
            covariates,
            cov_width: cov_names.len(),
            truth_trend: tt,
            truth_seasonal: tsn,
            truth_noise: tn,
        });
    }
    if series.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(TimeSeriesTable {
        series,
        granularity,
        cov_names,
    })
}

pub fn write_csv(table: &TimeSeriesTable, path: &std::path::Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let has_truth = table.series.iter().all(|s| s.truth_trend.is_some());
    let mut header = vec!["timestamp".to_string(), "series_id".to_string(), "value".to_string()];
    header.extend(table.cov_names.iter().cloned());
    if has_truth {
        header.extend(TRUTH_COLS.iter().map(|s| s.to_string()));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for s in &table.series {
        for t in 0..s.len() {
            let mut row = vec![
                s.timestamp(t, table.granularity).format(TIMESTAMP_FMT).to_string(),
                s.id.clone(),
                format!("{}", s.values[t]),
            ];
            for c in 0..s.cov_width {
                row.push(format!("{}", s.covariates[t * s.cov_width + c]));
            }
            if has_truth {
                row.push(format!("{}", s.truth_trend.as_ref().unwrap()[t]));
                row.push(format!("{}", s.truth_seasonal.as_ref().unwrap()[t]));
                row.push(format!("{}", s.truth_noise.as_ref().unwrap()[t]));
            }
            writer
                .write_record(&row)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Z-score normalization with population statistics from the first
/// `train_len` steps of each series.
pub fn normalize(
    table: &TimeSeriesTable,
    train_len: usize,
) -> Result<(TimeSeriesTable, Vec<NormalizationStats>)> {
    let mut out = table.clone();
    let mut stats = Vec::with_capacity(table.series.len());
    for s in &mut out.series {
        if train_len == 0 || train_len > s.len() {
            return Err(Error::Contract(format!(
                "normalize: training segment {train_len} invalid for series {} of length {}",
                s.id,
                s.len()
            )));
        }
        let seg = &s.values[..train_len];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / seg.len() as f64;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::Data(format!(
                "series {}: constant training segment cannot be normalized",
                s.id
            )));
        }
        let st = NormalizationStats { mean, std };
        for v in &mut s.values {
            *v = st.apply(*v);
        }
        stats.push(st);
    }
    Ok((out, stats))
}

/// Like [`normalize`], but the training segment is everything except the
/// final `holdout_steps` of each series (validation + test spans).
pub fn normalize_holdout(
    table: &TimeSeriesTable,
    holdout_steps: usize,
) -> Result<(TimeSeriesTable, Vec<NormalizationStats>)> {
    let mut out = table.clone();
    let mut stats = Vec::with_capacity(table.series.len());
    for (i, s) in table.series.iter().enumerate() {
        if holdout_steps >= s.len() {
            return Err(Error::Contract(format!(
                "normalize: holdout {holdout_steps} leaves no training data for series {}",
                s.id
            )));
        }
        let single = TimeSeriesTable {
            series: vec![s.clone()],
            granularity: table.granularity,
            cov_names: table.cov_names.clone(),
        };
        let (normed, st) = normalize(&single, s.len() - holdout_steps)?;
        out.series[i] = normed.series.into_iter().next().unwrap();
        stats.push(st[0]);
    }
    Ok((out, stats))
}

/// Maps a normalized forecast back to original units: the data mean shifts
/// the trend (and mean), both components and the std scale, variance scales
/// by std squared.
pub fn denormalize_components(path: &ForecastPath, stats: &NormalizationStats) -> ForecastPath {
    let s = stats.std;
    ForecastPath {
        means: path.means.iter().map(|&v| stats.invert(v)).collect(),
        variances: path.variances.iter().map(|&v| v * s * s).collect(),
        trends: path.trends.iter().map(|&v| stats.invert(v)).collect(),
        seasonals: path.seasonals.iter().map(|&v| v * s).collect(),
        q50: path.q50.iter().map(|&v| stats.invert(v)).collect(),
        q90: path.q90.iter().map(|&v| stats.invert(v)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalendarFeature {
    Month,
    DayOfWeek,
    HourOfDay,
    MinuteOfHour,
    Age,
}

impl CalendarFeature {
    fn scale(value: f64, min: f64, max: f64) -> f64 {
        (value - min) / (max - min) - 0.5
    }

    pub fn compute(&self, ts: NaiveDateTime, pos: usize, series_len: usize) -> f64 {
        match self {
            CalendarFeature::Month => Self::scale(ts.month() as f64, 1.0, 12.0),
            CalendarFeature::DayOfWeek => {
                Self::scale(ts.weekday().num_days_from_monday() as f64, 0.0, 6.0)
            }
            CalendarFeature::HourOfDay => Self::scale(ts.hour() as f64, 0.0, 23.0),
            CalendarFeature::MinuteOfHour => Self::scale(ts.minute() as f64, 0.0, 59.0),
            // Position within the series scaled to [-0.5, 0.5].
            CalendarFeature::Age => {
                if series_len <= 1 {
                    0.0
                } else {
                    pos as f64 / (series_len - 1) as f64 - 0.5
                }
            }
        }
    }
}

/// Default feature sets per granularity.
pub fn default_calendar_profile(g: Granularity) -> Vec<CalendarFeature> {
    match g {
        Granularity::Min30 => vec![
            CalendarFeature::Month,
            CalendarFeature::HourOfDay,
            CalendarFeature::MinuteOfHour,
        ],
        Granularity::Hour => vec![
            CalendarFeature::Month,
            CalendarFeature::HourOfDay,
            CalendarFeature::Age,
        ],
        Granularity::Day => vec![
            CalendarFeature::Month,
            CalendarFeature::DayOfWeek,
            CalendarFeature::Age,
        ],
    }
}

pub fn calendar_features(
    ts: NaiveDateTime,
    profile: &[CalendarFeature],
    pos: usize,
    series_len: usize,
) -> Vec<f64> {
    profile.iter().map(|f| f.compute(ts, pos, series_len)).collect()
}

/// One training/evaluation example. The lagged channel at position t holds
/// the target at t-1; the first position uses the value preceding the
/// window, so windows start at step 1 of a series at the earliest.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub series_id: String,
    pub series_index: usize,
    /// Absolute step index of the first input position within the series.
    pub start: usize,
    pub input_targets: Vec<f64>,
    pub horizon_targets: Vec<f64>,
    /// Row-major (t_l + t_h) x cov_width covariates (CSV + calendar).
    pub covariates: Vec<f64>,
    pub cov_width: usize,
    /// Lagged targets, length t_l + t_h; position t carries y_{t-1}.
    pub lagged: Vec<f64>,
}

impl WindowSample {
    pub fn t_l(&self) -> usize {
        self.input_targets.len()
    }

    pub fn t_h(&self) -> usize {
        self.horizon_targets.len()
    }
}

/// Sliding windows over every series. Windows begin at step 1 at the
/// earliest so that the lagged channel is always defined. Series shorter
/// than t_l + t_h + 1 are skipped; it is an error if no windows remain.
pub fn make_windows(
    table: &TimeSeriesTable,
    t_l: usize,
    t_h: usize,
    stride: usize,
    profile: &[CalendarFeature],
) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let mut windows = Vec::new();
    for (si, s) in table.series.iter().enumerate() {
        let need = t_l + t_h + 1;
        if s.len() < need {
            eprintln!(
                "warning: series {} of length {} too short for windows of {} steps; skipped",
                s.id,
                s.len(),
                need
            );
            continue;
        }
        let span = t_l + t_h;
        let mut start = 1usize;
        while start + span <= s.len() {
            let mut covariates = Vec::with_capacity(span * (s.cov_width + profile.len()));
            for t in 0..span {
                let pos = start + t;
                covariates
                    .extend_from_slice(&s.covariates[pos * s.cov_width..(pos + 1) * s.cov_width]);
                covariates.extend(calendar_features(
                    s.timestamp(pos, table.granularity),
                    profile,
                    pos,
                    s.len(),
                ));
            }
            windows.push(WindowSample {
                series_id: s.id.clone(),
                series_index: si,
                start,
                input_targets: s.values[start..start + t_l].to_vec(),
                horizon_targets: s.values[start + t_l..start + span].to_vec(),
                covariates,
                cov_width: s.cov_width + profile.len(),
                lagged: s.values[start - 1..start + span - 1].to_vec(),
            });
            start += stride;
        }
    }
    if windows.is_empty() {
        return Err(Error::Data("no windows could be extracted".into()));
    }
    Ok(windows)
}

/// Chronological split: test is the final segment, validation immediately
/// precedes it, training is everything before.
pub fn chrono_split(
    table: &TimeSeriesTable,
    val_steps: usize,
    test_steps: usize,
) -> Result<(TimeSeriesTable, TimeSeriesTable, TimeSeriesTable)> {
    let mut train = table.clone();
    let mut val = table.clone();
    let mut test = table.clone();
    for (i, s) in table.series.iter().enumerate() {
        let n = s.len();
        if val_steps + test_steps >= n {
            return Err(Error::Contract(format!(
                "split spans {val_steps}+{test_steps} exceed series {} length {n}",
                s.id
            )));
        }
        let train_end = n - val_steps - test_steps;
        let val_end = n - test_steps;
        train.series[i] = slice_series(s, 0, train_end, table.granularity);
        val.series[i] = slice_series(s, train_end, val_end, table.granularity);
        test.series[i] = slice_series(s, val_end, n, table.granularity);
    }
    Ok((train, val, test))
}

fn slice_series(s: &Series, from: usize, to: usize, g: Granularity) -> Series {
    Series {
        id: s.id.clone(),
        start: s.timestamp(from, g),
        values: s.values[from..to].to_vec(),
        covariates: s.covariates[from * s.cov_width..to * s.cov_width].to_vec(),
        cov_width: s.cov_width,
        truth_trend: s.truth_trend.as_ref().map(|v| v[from..to].to_vec()),
        truth_seasonal: s.truth_seasonal.as_ref().map(|v| v[from..to].to_vec()),
        truth_noise: s.truth_noise.as_ref().map(|v| v[from..to].to_vec()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrendKind {
    None,
    Linear { slope: f64, intercept: f64 },
    RandomWalk { step_std: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_series: usize,
    pub length: usize,
    pub period: usize,
    pub trend: TrendKind,
    pub seasonal_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
}

fn default_granularity() -> Granularity {
    Granularity::Hour
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.length == 0 || self.period == 0 {
            return Err(Error::Config("synth: all extents must be positive".into()));
        }
        Ok(())
    }
}

/// value(t) = trend(t) + amplitude * sin(2*pi*t/period + phase) + noise.
/// Ground-truth components are stored alongside; deterministic under seed.
pub fn synth_generate(config: &SynthConfig) -> Result<TimeSeriesTable> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = NaiveDateTime::parse_from_str("2020-01-01T00:00:00", TIMESTAMP_FMT).unwrap();
    let mut series = Vec::with_capacity(config.n_series);
    for i in 0..config.n_series {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut trend = Vec::with_capacity(config.length);
        let mut seasonal = Vec::with_capacity(config.length);
        let mut noise = Vec::with_capacity(config.length);
        let mut walk = 0.0f64;
        let normal = if config.noise_std > 0.0 {
            Some(Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let walk_normal = match config.trend {
            TrendKind::RandomWalk { step_std } if step_std > 0.0 => {
                Some(Normal::new(0.0, step_std).map_err(|e| Error::Config(e.to_string()))?)
            }
            _ => None,
        };
        for t in 0..config.length {
            let tr = match config.trend {
                TrendKind::None => 0.0,
                TrendKind::Linear { slope, intercept } => slope * t as f64 + intercept,
                TrendKind::RandomWalk { .. } => {
                    if let Some(n) = &walk_normal {
                        walk += n.sample(&mut rng);
                    }
                    walk
                }
            };
            trend.push(tr);
            seasonal.push(
                config.seasonal_amplitude
                    * (std::f64::consts::TAU * t as f64 / config.period as f64 + phase).sin(),
            );
            noise.push(normal.as_ref().map(|n| n.sample(&mut rng)).unwrap_or(0.0));
        }
        let values: Vec<f64> = (0..config.length)
            .map(|t| trend[t] + seasonal[t] + noise[t])
            .collect();
        series.push(Series {
            id: format!("s{i}"),
            start,
            values,
            covariates: Vec::new(),
            cov_width: 0,
            truth_trend: Some(trend),
            truth_seasonal: Some(seasonal),
            truth_noise: Some(noise),
        });
    }
    Ok(TimeSeriesTable {
        series,
        granularity: config.granularity,
        cov_names: Vec::new(),
    })
}

/// Repeats the final day of the input window (the last `steps_per_day`
/// input values) across the horizon, truncating or tiling as needed.
pub fn persistence_forecast(window: &WindowSample, steps_per_day: usize) -> Result<Vec<f64>> {
    if steps_per_day == 0 {
        return Err(Error::Config("steps_per_day must be positive".into()));
    }
    let t_l = window.t_l();
    if t_l < steps_per_day {
        return Err(Error::Contract(format!(
            "persistence: input of {t_l} steps shorter than one day ({steps_per_day})"
        )));
    }
    let last_day = &window.input_targets[t_l - steps_per_day..];
    Ok((0..window.t_h())
        .map(|t| last_day[t % steps_per_day])
        .collect())
}

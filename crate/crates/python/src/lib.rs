//! Python bindings for the state-space decomposition forecasting core.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ssdnet::data::{persistence_forecast, synth_generate, Granularity, SynthConfig, TrendKind, WindowSample};
use ssdnet::loss::{composite_loss, quantile_loss, LossConfig};
use ssdnet::ssm::{
    build_transition_system, gaussian_quantile, ssm_unroll, theorem1_bounds, Innovation, SsmState,
};

fn err(e: ssdnet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Fixed transition system of a given state dimension.
#[pyclass(name = "TransitionSystem")]
struct PyTransitionSystem {
    inner: ssdnet::ssm::TransitionSystem,
}

#[pymethods]
impl PyTransitionSystem {
    #[new]
    fn new(s: usize) -> PyResult<Self> {
        Ok(Self { inner: build_transition_system(s).map_err(err)? })
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    /// Transition matrix as a nested list (row-major).
    fn gamma(&self) -> Vec<Vec<f64>> {
        let s = self.inner.s();
        let data = self.inner.gamma().data();
        (0..s).map(|i| data[i * s..(i + 1) * s].to_vec()).collect()
    }

    /// Observation vector (1, 1, 0, ..., 0).
    fn z(&self) -> Vec<f64> {
        self.inner.z().to_vec()
    }
}

/// Unroll the decoder recurrence from an initial state with per-step
/// innovations and variances; returns a dict of forecast paths.
#[pyfunction]
fn unroll(
    py: Python<'_>,
    s: usize,
    alpha0: Vec<f64>,
    innovations: Vec<Vec<f64>>,
    variances: Vec<f64>,
) -> PyResult<PyObject> {
    let sys = build_transition_system(s).map_err(err)?;
    let state = SsmState { alpha: alpha0 };
    let innos: Vec<Innovation> = innovations.into_iter().map(|c| Innovation { c }).collect();
    let path = ssm_unroll(&state, &innos, &variances, &sys).map_err(err)?;
    let dict = pyo3::types::PyDict::new_bound(py);
    dict.set_item("means", path.means)?;
    dict.set_item("variances", path.variances)?;
    dict.set_item("trends", path.trends)?;
    dict.set_item("seasonals", path.seasonals)?;
    dict.set_item("q50", path.q50)?;
    dict.set_item("q90", path.q90)?;
    Ok(dict.into())
}

/// Worst-case bounds (|trend|, |seasonality|) at horizon step t for state
/// dimension s, given innovations bounded by 0.5 and zero initial state.
#[pyfunction(name = "theorem1_bounds")]
fn py_theorem1_bounds(t: usize, s: usize) -> (f64, f64) {
    theorem1_bounds(t, s)
}

/// Quantile of a Gaussian with the given mean and variance.
#[pyfunction(name = "gaussian_quantile")]
fn py_gaussian_quantile(mean: f64, variance: f64, rho: f64) -> PyResult<f64> {
    gaussian_quantile(mean, variance, rho).map_err(err)
}

/// Normalized quantile loss 2*sum(P_rho)/sum(|y|).
#[pyfunction(name = "quantile_loss")]
fn py_quantile_loss(targets: Vec<f64>, predictions: Vec<f64>, rho: f64) -> PyResult<f64> {
    quantile_loss(&targets, &predictions, rho).map_err(err)
}

/// Composite training loss: a * Gaussian NLL + MAE over the horizon.
#[pyfunction(name = "composite_loss")]
fn py_composite_loss(
    means: Vec<f64>,
    variances: Vec<f64>,
    targets: Vec<f64>,
    a: f64,
) -> PyResult<f64> {
    composite_loss(&means, &variances, &targets, &LossConfig { a }).map_err(err)
}

/// Generate one synthetic series; returns (values, trend, seasonal).
#[pyfunction]
#[pyo3(signature = (length, period, seed, slope=0.0, seasonal_amplitude=1.0, noise_std=0.1))]
fn synth_series(
    length: usize,
    period: usize,
    seed: u64,
    slope: f64,
    seasonal_amplitude: f64,
    noise_std: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cfg = SynthConfig {
        n_series: 1,
        length,
        period,
        trend: TrendKind::Linear { slope, intercept: 0.0 },
        seasonal_amplitude,
        noise_std,
        seed,
        granularity: Granularity::Hour,
    };
    let table = synth_generate(&cfg).map_err(err)?;
    let s = &table.series[0];
    Ok((
        s.values.clone(),
        s.truth_trend.clone().unwrap_or_default(),
        s.truth_seasonal.clone().unwrap_or_default(),
    ))
}

/// Persistence baseline: tile the last `steps_per_day` inputs across the
/// horizon.
#[pyfunction(name = "persistence_forecast")]
fn py_persistence_forecast(
    input_targets: Vec<f64>,
    horizon: usize,
    steps_per_day: usize,
) -> PyResult<Vec<f64>> {
    let t_l = input_targets.len();
    let window = WindowSample {
        series_id: "py".to_string(),
        series_index: 0,
        start: 0,
        input_targets,
        horizon_targets: vec![0.0; horizon],
        covariates: vec![],
        cov_width: 0,
        lagged: vec![0.0; t_l + horizon],
    };
    persistence_forecast(&window, steps_per_day).map_err(err)
}

#[pymodule]
fn ssdnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransitionSystem>()?;
    m.add_function(wrap_pyfunction!(unroll, m)?)?;
    m.add_function(wrap_pyfunction!(py_theorem1_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(py_gaussian_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantile_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_composite_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_series, m)?)?;
    m.add_function(wrap_pyfunction!(py_persistence_forecast, m)?)?;
    Ok(())
}

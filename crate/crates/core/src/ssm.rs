//! Fixed-form state-space decoder.
//!
//! The transition matrix and emission vector are constant: the first state
//! slot carries a random-walk trend, the remaining `s-1` slots carry a dummy
//! seasonal block where the current seasonal value is the negative sum of
//! the previous `s-1` values. A bounded innovation vector perturbs the state
//! at every step, and a per-step variance completes the Gaussian forecast.

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed transition matrix and emission vector for seasonality period `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSystem {
    s: usize,
    gamma: Tensor,
    z: Vec<f64>,
}

impl TransitionSystem {
    pub fn s(&self) -> usize {
        self.s
    }

    /// The s-by-s transition matrix.
    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

/// Builds the fixed transition system: row 0 keeps the trend, row 1 forms
/// the dummy-seasonal negative sum, rows 2..s shift the seasonal lags.
pub fn build_transition_system(s: usize) -> Result<TransitionSystem> {
    if s < 2 {
        return Err(Error::Config(format!(
            "seasonality period must be >= 2, got {s}"
        )));
    }
    let mut gamma = vec![0.0; s * s];
    gamma[0] = 1.0;
    for j in 1..s {
        gamma[s + j] = -1.0;
    }
    for i in 2..s {
        gamma[i * s + (i - 1)] = 1.0;
    }
    let mut z = vec![0.0; s];
    z[0] = 1.0;
    z[1] = 1.0;
    Ok(TransitionSystem {
        s,
        gamma: Tensor::new(vec![s, s], gamma)?,
        z,
    })
}

/// State vector: slot 0 is the trend, slots 1..s the seasonal values
/// (most recent first).
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub alpha: Vec<f64>,
}

impl SsmState {
    pub fn zeros(s: usize) -> Self {
        SsmState { alpha: vec![0.0; s] }
    }

    pub fn trend(&self) -> f64 {
        self.alpha[0]
    }

    pub fn seasonality(&self) -> f64 {
        self.alpha[1]
    }
}

/// Bounded per-step state perturbation; every entry lies in [-0.5, 0.5].
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub c: Vec<f64>,
}

impl Innovation {
    pub fn zeros(s: usize) -> Self {
        Innovation { c: vec![0.0; s] }
    }
}

/// Per-step Gaussian forecast with its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub mean: f64,
    pub variance: f64,
    pub trend: f64,
    pub seasonality: f64,
}

/// One state transition: alpha' = Gamma * alpha + c.
pub fn ssm_step(state: &SsmState, c: &Innovation, sys: &TransitionSystem) -> Result<SsmState> {
    let s = sys.s;
    if state.alpha.len() != s || c.c.len() != s {
        return Err(Error::Contract(format!(
            "ssm_step: state len {} / innovation len {} vs s={s}",
            state.alpha.len(),
            c.c.len()
        )));
    }
    let mut alpha = vec![0.0; s];
    alpha[0] = state.alpha[0] + c.c[0];
    let lag_sum: f64 = state.alpha[1..].iter().sum();
    alpha[1] = -lag_sum + c.c[1];
    for i in 2..s {
        alpha[i] = state.alpha[i - 1] + c.c[i];
    }
    Ok(SsmState { alpha })
}

/// Horizon forecast: per-step mean, variance, trend and seasonality, plus
/// the 0.5 and 0.9 Gaussian quantiles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastPath {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub trends: Vec<f64>,
    pub seasonals: Vec<f64>,
    pub q50: Vec<f64>,
    pub q90: Vec<f64>,
}

impl ForecastPath {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Unrolls the state recurrence over the horizon. The mean at each step is
/// trend + seasonality (identical arithmetic to the emission product since
/// z = (1, 1, 0, ...)).
pub fn ssm_unroll(
    alpha0: &SsmState,
    innovations: &[Innovation],
    variances: &[f64],
    sys: &TransitionSystem,
) -> Result<ForecastPath> {
    if innovations.len() != variances.len() {
        return Err(Error::Contract(format!(
            "ssm_unroll: {} innovations vs {} variances",
            innovations.len(),
            variances.len()
        )));
    }
    if let Some(&bad) = variances.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Contract(format!(
            "ssm_unroll: non-positive variance {bad}"
        )));
    }
    let mut path = ForecastPath::default();
    let mut state = alpha0.clone();
    for (c, &var) in innovations.iter().zip(variances) {
        state = ssm_step(&state, c, sys)?;
        let trend = state.trend();
        let seas = state.seasonality();
        let mean = trend + seas;
        path.means.push(mean);
        path.variances.push(var);
        path.trends.push(trend);
        path.seasonals.push(seas);
        path.q50.push(mean);
        path.q90.push(gaussian_quantile(mean, var, 0.9)?);
    }
    Ok(path)
}

/// Upper bounds on |trend| and |seasonality| at step index `t` (0-based):
/// ((t+1)*0.5, (s-1+t)*0.5).
pub fn theorem1_bounds(t: usize, s: usize) -> (f64, f64) {
    ((t as f64 + 1.0) * 0.5, (s as f64 - 1.0 + t as f64) * 0.5)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Inverse standard normal CDF via bisection, accurate to ~1e-12.
pub fn std_normal_quantile(rho: f64) -> Result<f64> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::Contract(format!("quantile level {rho} outside (0,1)")));
    }
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// rho-quantile of a Gaussian: mean + sqrt(variance) * Phi^{-1}(rho).
pub fn gaussian_quantile(mean: f64, variance: f64, rho: f64) -> Result<f64> {
    if variance <= 0.0 {
        return Err(Error::Contract(format!(
            "gaussian_quantile: variance {variance} must be positive"
        )));
    }
    if rho == 0.5 {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * std_normal_quantile(rho)?)
}

fn affine(o: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let (d, out) = (w.shape()[0], w.shape()[1]);
    if o.len() != d || b.len() != out {
        return Err(Error::Shape(format!(
            "affine head: latent len {} vs weights {:?} / bias {}",
            o.len(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = b.to_vec();
    for (i, &oi) in o.iter().enumerate() {
        for j in 0..out {
            y[j] += oi * w.data()[i * out + j];
        }
    }
    Ok(y)
}

fn hard_sigmoid_centered(x: f64) -> f64 {
    if x <= -3.0 {
        -0.5
    } else if x >= 3.0 {
        0.5
    } else {
        x / 6.0
    }
}

/// Innovation head: HardSigmoid(Linear(o)) - 0.5, entries in [-0.5, 0.5].
pub fn innovation_head(o: &[f64], w: &Tensor, b: &[f64]) -> Result<Innovation> {
    if o.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("innovation_head: non-finite latent".into()));
    }
    let pre = affine(o, w, b)?;
    Ok(Innovation {
        c: pre.into_iter().map(hard_sigmoid_centered).collect(),
    })
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Variance head: Softplus(Linear(o)), strictly positive scalar.
pub fn variance_head(o: &[f64], w: &Tensor, b: &[f64]) -> Result<f64> {
    if o.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("variance_head: non-finite latent".into()));
    }
    let pre = affine(o, w, b)?;
    if pre.len() != 1 {
        return Err(Error::Shape(format!(
            "variance_head must produce a scalar, got {}",
            pre.len()
        )));
    }
    Ok(stable_softplus(pre[0]).max(f64::MIN_POSITIVE))
}

/// Initial-state head: same activation as the innovation head, applied to
/// the latent at the first decoding position with its own weights.
pub fn init_state_head(o_first: &[f64], w: &Tensor, b: &[f64]) -> Result<SsmState> {
    let inn = innovation_head(o_first, w, b)?;
    Ok(SsmState { alpha: inn.c })
}

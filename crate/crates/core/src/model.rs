//! Full model assembly: encoder latents feed three affine heads (innovation,
//! variance, initial state) whose outputs drive the fixed state-space
//! recurrence on the tape, yielding differentiable per-step means and
//! variances over the forecast horizon.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::encoder::{
    embed_inputs, encoder_forward, init_encoder_params, AttentionMap, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::ssm::{build_transition_system, gaussian_quantile, ForecastPath, TransitionSystem};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Seasonality period of the state-space decoder.
    pub s: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.s < 2 {
            return Err(Error::Config(format!("s must be >= 2, got {}", self.s)));
        }
        Ok(())
    }
}

/// Encoder + heads + transition system with normalization bookkeeping.
pub struct SsdNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub sys: TransitionSystem,
    /// Covariate width the model was initialized for (without the lagged
    /// target channel).
    pub n_cov: usize,
}

/// Differentiable per-step outputs of one forward pass.
pub struct ForwardNodes {
    pub means: Vec<NodeId>,
    pub variances: Vec<NodeId>,
    pub trends: Vec<NodeId>,
    pub seasonals: Vec<NodeId>,
    pub attention: Vec<AttentionMap>,
}

impl SsdNet {
    pub fn new(config: ModelConfig, n_cov: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let sys = build_transition_system(config.s)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_params(&config.encoder, 1 + n_cov, &mut params, &mut rng)?;
        let d = config.encoder.d_hid;
        let s = config.s;
        params.insert_init("head.innovation.w", vec![d, s], d, &mut rng)?;
        params.insert_init("head.innovation.b", vec![s], d, &mut rng)?;
        params.insert_init("head.variance.w", vec![d, 1], d, &mut rng)?;
        params.insert_init("head.variance.b", vec![1], d, &mut rng)?;
        params.insert_init("head.init.w", vec![d, s], d, &mut rng)?;
        params.insert_init("head.init.b", vec![s], d, &mut rng)?;
        Ok(SsdNet {
            config,
            params,
            sys,
            n_cov,
        })
    }

    /// Assembles the input matrix: per position `[lagged_target, covariates]`.
    /// `lagged` overrides the window's own lagged channel at the horizon
    /// positions when decoding autoregressively.
    pub fn input_matrix(&self, window: &WindowSample, lagged: &[f64]) -> Result<Tensor> {
        let t = self.config.encoder.seq_len();
        if window.t_l() != self.config.encoder.t_l || window.t_h() != self.config.encoder.t_h {
            return Err(Error::Contract(format!(
                "window geometry ({}, {}) does not match model ({}, {})",
                window.t_l(),
                window.t_h(),
                self.config.encoder.t_l,
                self.config.encoder.t_h
            )));
        }
        if window.cov_width != self.n_cov {
            return Err(Error::Contract(format!(
                "covariate width {} does not match model schema {}",
                window.cov_width, self.n_cov
            )));
        }
        let width = 1 + self.n_cov;
        let mut data = Vec::with_capacity(t * width);
        for pos in 0..t {
            data.push(lagged[pos]);
            data.extend_from_slice(
                &window.covariates[pos * window.cov_width..(pos + 1) * window.cov_width],
            );
        }
        Tensor::new(vec![t, width], data)
    }

    /// One forward pass on the tape. The lagged channel content is caller
    /// supplied (teacher forcing in training, model feedback at inference).
    pub fn build_forward(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        window: &WindowSample,
        lagged: &[f64],
        capture_attention: bool,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config.encoder;
        let inputs = self.input_matrix(window, lagged)?;
        let embedded = embed_inputs(g, binding, &self.params, cfg, &inputs, window.series_index)?;
        let enc = encoder_forward(g, binding, &self.params, cfg, embedded, capture_attention)?;
        let latents = enc.latents;

        let s = self.config.s;
        let wc = binding.bind(g, &self.params, "head.innovation.w")?;
        let bc = binding.bind(g, &self.params, "head.innovation.b")?;
        let wv = binding.bind(g, &self.params, "head.variance.w")?;
        let bv = binding.bind(g, &self.params, "head.variance.b")?;
        let wi = binding.bind(g, &self.params, "head.init.w")?;
        let bi = binding.bind(g, &self.params, "head.init.b")?;

        // Innovations for all horizon steps at once: (t_h x s).
        let c_pre = g.matmul(latents, wc)?;
        let c_pre = g.add(c_pre, bc)?;
        let c_act = g.hard_sigmoid(c_pre)?;
        let c_all = g.add_scalar(c_act, -0.5)?;

        let v_pre = g.matmul(latents, wv)?;
        let v_pre = g.add(v_pre, bv)?;
        let v_all = g.softplus(v_pre)?;

        // Initial state from the latent at the first decoding position.
        let o_first = g.slice_rows(latents, 0, 1)?;
        let a_pre = g.matmul(o_first, wi)?;
        let a_pre = g.add(a_pre, bi)?;
        let a_act = g.hard_sigmoid(a_pre)?;
        let mut alpha = g.add_scalar(a_act, -0.5)?;

        // alpha is a row vector, so the transition is alpha * Gamma^T.
        let mut gamma_t = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                gamma_t[j * s + i] = self.sys.gamma().data()[i * s + j];
            }
        }
        let gamma_t = g.leaf(Tensor::new(vec![s, s], gamma_t)?);

        let t_h = self.config.encoder.t_h;
        let mut out = ForwardNodes {
            means: Vec::with_capacity(t_h),
            variances: Vec::with_capacity(t_h),
            trends: Vec::with_capacity(t_h),
            seasonals: Vec::with_capacity(t_h),
            attention: enc.attention,
        };
        for t in 0..t_h {
            let c_t = g.slice_rows(c_all, t, t + 1)?;
            let moved = g.matmul(alpha, gamma_t)?;
            alpha = g.add(moved, c_t)?;
            let trend = g.slice_cols(alpha, 0, 1)?;
            let seas = g.slice_cols(alpha, 1, 2)?;
            let mean = g.add(trend, seas)?;
            let var = g.slice_rows(v_all, t, t + 1)?;
            out.means.push(mean);
            out.variances.push(var);
            out.trends.push(trend);
            out.seasonals.push(seas);
        }
        Ok(out)
    }

    /// Teacher-forced forward pass in eval mode, returning the normalized
    /// forecast path (no gradients).
    pub fn forward_path(&self, window: &WindowSample, capture_attention: bool) -> Result<(ForecastPath, Vec<AttentionMap>)> {
        let mut g = Graph::eval();
        let mut binding = ParamBinding::new();
        let nodes = self.build_forward(&mut g, &mut binding, window, &window.lagged, capture_attention)?;
        let path = read_path(&g, &nodes)?;
        Ok((path, nodes.attention))
    }

    /// Autoregressive decoding: the lagged channel at horizon position t is
    /// filled with the predicted median from step t-1 (deterministic, one
    /// forward pass per horizon step). Returns the normalized path.
    pub fn decode_forecast(&self, window: &WindowSample, capture_attention: bool) -> Result<(ForecastPath, Vec<AttentionMap>)> {
        let t_l = self.config.encoder.t_l;
        let t_h = self.config.encoder.t_h;
        let mut lagged = window.lagged.clone();
        let mut final_output = None;
        for step in 0..t_h {
            let capture = capture_attention && step == t_h - 1;
            let mut g = Graph::eval();
            let mut binding = ParamBinding::new();
            let nodes = self.build_forward(&mut g, &mut binding, window, &lagged, capture)?;
            let mean = g.value(nodes.means[step]).item()?;
            if step + 1 < t_h {
                // Position t_l + step + 1 carries the lag of horizon step+1.
                lagged[t_l + step + 1] = mean;
            }
            if step == t_h - 1 {
                final_output = Some((read_path(&g, &nodes)?, nodes.attention));
            }
        }
        Ok(final_output.expect("t_h >= 1"))
    }
}

/// Finite-difference check of the full composite-loss gradient with respect
/// to every model parameter on one teacher-forced window. Returns the max
/// relative error. Run with dropout disabled (eval-mode tapes are used).
pub fn model_grad_check(
    model: &mut SsdNet,
    window: &WindowSample,
    loss_cfg: &crate::loss::LossConfig,
) -> Result<f64> {
    let eval_loss = |model: &SsdNet| -> Result<f64> {
        let mut g = Graph::eval();
        let mut binding = ParamBinding::new();
        let nodes = model.build_forward(&mut g, &mut binding, window, &window.lagged, false)?;
        let loss = crate::loss::composite_loss_nodes(
            &mut g,
            &nodes.means,
            &nodes.variances,
            &window.horizon_targets,
            loss_cfg,
        )?;
        g.value(loss).item()
    };

    // Analytic gradients.
    model.params.zero_grads();
    {
        let mut g = Graph::eval();
        let mut binding = ParamBinding::new();
        let nodes = model.build_forward(&mut g, &mut binding, window, &window.lagged, false)?;
        let loss = crate::loss::composite_loss_nodes(
            &mut g,
            &nodes.means,
            &nodes.variances,
            &window.horizon_targets,
            loss_cfg,
        )?;
        g.backward(loss)?;
        binding.collect(&g, &mut model.params, 1.0);
    }
    let analytic: Vec<Tensor> = model.params.iter().map(|p| p.grad.clone()).collect();

    const EPS: f64 = 1e-5;
    let mut max_rel = 0.0f64;
    let snapshot = model.params.snapshot();
    let mut probe = snapshot.clone();
    for (k, base) in snapshot.iter().enumerate() {
        for e in 0..base.numel() {
            let x0 = base.data()[e];
            probe[k].data_mut()[e] = x0 + EPS;
            model.params.restore(&probe);
            let fp = eval_loss(model)?;
            probe[k].data_mut()[e] = x0 - EPS;
            model.params.restore(&probe);
            let fm = eval_loss(model)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * EPS);
            let a = analytic[k].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    model.params.restore(&snapshot);
    Ok(max_rel)
}

/// Reads the numeric forecast path out of a completed forward pass.
pub fn read_path(g: &Graph, nodes: &ForwardNodes) -> Result<ForecastPath> {
    let mut path = ForecastPath::default();
    for t in 0..nodes.means.len() {
        let mean = g.value(nodes.means[t]).item()?;
        let var = g.value(nodes.variances[t]).item()?;
        path.means.push(mean);
        path.variances.push(var);
        path.trends.push(g.value(nodes.trends[t]).item()?);
        path.seasonals.push(g.value(nodes.seasonals[t]).item()?);
        path.q50.push(mean);
        path.q90.push(gaussian_quantile(mean, var, 0.9)?);
    }
    Ok(path)
}

//! Sequence encoders producing per-step latent vectors for the state-space
//! decoder: a causally masked Transformer with attention capture, and a
//! stacked LSTM used as an ablation. Both return latents of identical shape
//! so the decoder heads are encoder-agnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_hid: usize,
    pub n_layers: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub t_l: usize,
    pub t_h: usize,
    #[serde(default)]
    pub use_id_embedding: bool,
    #[serde(default = "default_n_series")]
    pub n_series: usize,
}

fn default_n_series() -> usize {
    1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_hid", self.d_hid),
            ("n_layers", self.n_layers),
            ("d_kv", self.d_kv),
            ("n_heads", self.n_heads),
            ("t_l", self.t_l),
            ("t_h", self.t_h),
            ("n_series", self.n_series),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.t_l + self.t_h
    }
}

/// Softmax weights of one attention head after a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

pub struct EncoderOutput {
    /// Latents at the horizon positions, t_h x d_hid.
    pub latents: NodeId,
    pub attention: Vec<AttentionMap>,
}

/// Registers all encoder parameters. `input_width` is 1 (lagged target)
/// plus the covariate count.
pub fn init_encoder_params(
    cfg: &EncoderConfig,
    input_width: usize,
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let d = cfg.d_hid;
    store.insert_init("embed.w", vec![input_width, d], input_width, rng)?;
    store.insert_init("embed.b", vec![d], input_width, rng)?;
    store.insert_init("embed.pos", vec![cfg.seq_len(), d], d, rng)?;
    if cfg.use_id_embedding {
        store.insert_init("embed.id", vec![cfg.n_series, d], d, rng)?;
    }
    match cfg.kind {
        EncoderKind::Transformer => {
            let dk = cfg.n_heads * cfg.d_kv;
            let ff = 4 * d;
            for l in 0..cfg.n_layers {
                let p = format!("encoder.layer{l}");
                store.insert_init(&format!("{p}.attn.wq"), vec![d, dk], d, rng)?;
                store.insert_init(&format!("{p}.attn.wk"), vec![d, dk], d, rng)?;
                store.insert_init(&format!("{p}.attn.wv"), vec![d, dk], d, rng)?;
                store.insert_init(&format!("{p}.attn.wo"), vec![dk, d], dk, rng)?;
                store.insert_init(&format!("{p}.attn.bo"), vec![d], dk, rng)?;
                store.insert(&format!("{p}.ln1.g"), Tensor::vector(vec![1.0; d]))?;
                store.insert(&format!("{p}.ln1.b"), Tensor::vector(vec![0.0; d]))?;
                store.insert_init(&format!("{p}.ff.w1"), vec![d, ff], d, rng)?;
                store.insert_init(&format!("{p}.ff.b1"), vec![ff], d, rng)?;
                store.insert_init(&format!("{p}.ff.w2"), vec![ff, d], ff, rng)?;
                store.insert_init(&format!("{p}.ff.b2"), vec![d], ff, rng)?;
                store.insert(&format!("{p}.ln2.g"), Tensor::vector(vec![1.0; d]))?;
                store.insert(&format!("{p}.ln2.b"), Tensor::vector(vec![0.0; d]))?;
            }
        }
        EncoderKind::Lstm => {
            for l in 0..cfg.n_layers {
                let p = format!("encoder.lstm{l}");
                store.insert_init(&format!("{p}.wx"), vec![d, 4 * d], d, rng)?;
                store.insert_init(&format!("{p}.wh"), vec![d, 4 * d], d, rng)?;
                // Forget-gate bias starts at 1 so early cells retain state.
                let mut b = vec![0.0; 4 * d];
                for v in &mut b[d..2 * d] {
                    *v = 1.0;
                }
                store.insert(&format!("{p}.b"), Tensor::vector(b))?;
            }
        }
    }
    Ok(())
}

/// Projects `[y_{t-1}, x_t]` rows to width d_hid and adds the learned
/// position embedding (and series-ID embedding when enabled).
pub fn embed_inputs(
    g: &mut Graph,
    binding: &mut ParamBinding,
    store: &ParamStore,
    cfg: &EncoderConfig,
    inputs: &Tensor,
    series_id: usize,
) -> Result<NodeId> {
    let t = cfg.seq_len();
    if inputs.shape().len() != 2 || inputs.shape()[0] != t {
        return Err(Error::Contract(format!(
            "embed_inputs: expected {t} rows, got shape {:?}",
            inputs.shape()
        )));
    }
    let expected_width = store
        .get("embed.w")
        .map(|p| p.value.shape()[0])
        .unwrap_or(0);
    if inputs.shape()[1] != expected_width {
        return Err(Error::Contract(format!(
            "embed_inputs: input width {} does not match schema width {expected_width}",
            inputs.shape()[1]
        )));
    }
    let x = g.leaf(inputs.clone());
    let w = binding.bind(g, store, "embed.w")?;
    let b = binding.bind(g, store, "embed.b")?;
    let pos = binding.bind(g, store, "embed.pos")?;
    let proj = g.matmul(x, w)?;
    let proj = g.add(proj, b)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos_rows = g.embed(pos, &positions)?;
    let mut out = g.add(proj, pos_rows)?;
    if cfg.use_id_embedding {
        if series_id >= cfg.n_series {
            return Err(Error::Contract(format!(
                "series id {series_id} out of range for {} series",
                cfg.n_series
            )));
        }
        let id_table = binding.bind(g, store, "embed.id")?;
        let id_rows = g.embed(id_table, &vec![series_id; t])?;
        out = g.add(out, id_rows)?;
    }
    Ok(out)
}

/// Causally masked multi-head self-attention stack (post-layer-norm,
/// ReLU feed-forward of width 4*d_hid). Attention maps are captured only
/// when requested; capture is intended for eval mode.
pub fn transformer_forward(
    g: &mut Graph,
    binding: &mut ParamBinding,
    store: &ParamStore,
    cfg: &EncoderConfig,
    embedded: NodeId,
    capture_attention: bool,
) -> Result<EncoderOutput> {
    let scale = 1.0 / (cfg.d_kv as f64).sqrt();
    let mut x = g.dropout(embedded, cfg.dropout)?;
    let mut attention = Vec::new();
    for l in 0..cfg.n_layers {
        let p = format!("encoder.layer{l}");
        let wq = binding.bind(g, store, &format!("{p}.attn.wq"))?;
        let wk = binding.bind(g, store, &format!("{p}.attn.wk"))?;
        let wv = binding.bind(g, store, &format!("{p}.attn.wv"))?;
        let q_all = g.matmul(x, wq)?;
        let k_all = g.matmul(x, wk)?;
        let v_all = g.matmul(x, wv)?;
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (lo, hi) = (h * cfg.d_kv, (h + 1) * cfg.d_kv);
            let q = g.slice_cols(q_all, lo, hi)?;
            let k = g.slice_cols(k_all, lo, hi)?;
            let v = g.slice_cols(v_all, lo, hi)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.causal_softmax(scores)?;
            if capture_attention {
                attention.push(AttentionMap {
                    layer: l,
                    head: h,
                    weights: g.value(weights).clone(),
                });
            }
            let weights = g.dropout(weights, cfg.dropout)?;
            head_outputs.push(g.matmul(weights, v)?);
        }
        let ctx = g.concat_last(&head_outputs)?;
        let wo = binding.bind(g, store, &format!("{p}.attn.wo"))?;
        let bo = binding.bind(g, store, &format!("{p}.attn.bo"))?;
        let attn_out = g.matmul(ctx, wo)?;
        let attn_out = g.add(attn_out, bo)?;
        let attn_out = g.dropout(attn_out, cfg.dropout)?;
        let res = g.add(x, attn_out)?;
        let g1 = binding.bind(g, store, &format!("{p}.ln1.g"))?;
        let b1 = binding.bind(g, store, &format!("{p}.ln1.b"))?;
        let x1 = g.layer_norm(res, g1, b1)?;

        let w1 = binding.bind(g, store, &format!("{p}.ff.w1"))?;
        let fb1 = binding.bind(g, store, &format!("{p}.ff.b1"))?;
        let w2 = binding.bind(g, store, &format!("{p}.ff.w2"))?;
        let fb2 = binding.bind(g, store, &format!("{p}.ff.b2"))?;
        let ff = g.matmul(x1, w1)?;
        let ff = g.add(ff, fb1)?;
        let ff = g.relu(ff)?;
        let ff = g.matmul(ff, w2)?;
        let ff = g.add(ff, fb2)?;
        let ff = g.dropout(ff, cfg.dropout)?;
        let res2 = g.add(x1, ff)?;
        let g2 = binding.bind(g, store, &format!("{p}.ln2.g"))?;
        let b2 = binding.bind(g, store, &format!("{p}.ln2.b"))?;
        x = g.layer_norm(res2, g2, b2)?;
    }
    let latents = g.slice_rows(x, cfg.t_l, cfg.seq_len())?;
    Ok(EncoderOutput { latents, attention })
}

/// Stacked left-to-right LSTM; gate order is [input, forget, cell, output].
pub fn lstm_forward(
    g: &mut Graph,
    binding: &mut ParamBinding,
    store: &ParamStore,
    cfg: &EncoderConfig,
    embedded: NodeId,
) -> Result<EncoderOutput> {
    let t = cfg.seq_len();
    let d = cfg.d_hid;
    let mut x = g.dropout(embedded, cfg.dropout)?;
    for l in 0..cfg.n_layers {
        let p = format!("encoder.lstm{l}");
        let wx = binding.bind(g, store, &format!("{p}.wx"))?;
        let wh = binding.bind(g, store, &format!("{p}.wh"))?;
        let b = binding.bind(g, store, &format!("{p}.b"))?;
        let mut h = g.leaf(Tensor::zeros(vec![1, d]));
        let mut c = g.leaf(Tensor::zeros(vec![1, d]));
        let mut rows = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.slice_rows(x, step, step + 1)?;
            let gx = g.matmul(xt, wx)?;
            let gh = g.matmul(h, wh)?;
            let gates = g.add(gx, gh)?;
            let gates = g.add(gates, b)?;
            let i_gate = g.slice_cols(gates, 0, d)?;
            let f_gate = g.slice_cols(gates, d, 2 * d)?;
            let g_gate = g.slice_cols(gates, 2 * d, 3 * d)?;
            let o_gate = g.slice_cols(gates, 3 * d, 4 * d)?;
            let i_gate = g.sigmoid(i_gate)?;
            let f_gate = g.sigmoid(f_gate)?;
            let g_gate = g.tanh(g_gate)?;
            let o_gate = g.sigmoid(o_gate)?;
            let fc = g.mul(f_gate, c)?;
            let ig = g.mul(i_gate, g_gate)?;
            c = g.add(fc, ig)?;
            let ct = g.tanh(c)?;
            h = g.mul(o_gate, ct)?;
            rows.push(h);
        }
        let stacked = g.concat_rows(&rows)?;
        x = g.dropout(stacked, cfg.dropout)?;
    }
    let latents = g.slice_rows(x, cfg.t_l, cfg.seq_len())?;
    Ok(EncoderOutput {
        latents,
        attention: Vec::new(),
    })
}

/// Runs the configured encoder over an embedded sequence.
pub fn encoder_forward(
    g: &mut Graph,
    binding: &mut ParamBinding,
    store: &ParamStore,
    cfg: &EncoderConfig,
    embedded: NodeId,
    capture_attention: bool,
) -> Result<EncoderOutput> {
    match cfg.kind {
        EncoderKind::Transformer => {
            transformer_forward(g, binding, store, cfg, embedded, capture_attention)
        }
        EncoderKind::Lstm => lstm_forward(g, binding, store, cfg, embedded),
    }
}

/// Writes one CSV per (layer, head): rows are query steps, columns key steps.
pub fn export_attention(maps: &[AttentionMap], dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for map in maps {
        let path = dir.join(format!("attention_layer{}_head{}.csv", map.layer, map.head));
        let cols = map.weights.last_dim();
        let mut body = String::new();
        for r in 0..map.weights.rows() {
            let row: Vec<String> = map.weights.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

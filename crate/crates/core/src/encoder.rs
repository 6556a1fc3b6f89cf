//! Miniature post-norm transformer encoder with learned positions and
//! masked mean pooling.
//!
//! Checkpoint keys (JSON, flat row-major arrays):
//! `tok_emb [vocab, d]`, `pos_emb [max_len, d]`, and for layer `i`:
//! `layers.{i}.wq`, `.wk`, `.wv`, `.wo` `[d, d]`; `.w1 [d, d_ff]`,
//! `.b1 [d_ff]`, `.w2 [d_ff, d]`, `.b2 [d]`; `.ln1_gain`, `.ln1_bias`,
//! `.ln2_gain`, `.ln2_bias` `[d]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::EncodedSeq;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    pub preset_name: String,
}

impl EncoderConfig {
    /// Named size presets: `tiny` (1 layer, d=32), `small` (2, 64),
    /// `base` (4, 128), and `check` (2, 16) for gradient checks.
    pub fn preset(name: &str, vocab_size: usize, max_len: usize) -> Result<Self> {
        let (n_layers, d_model, n_heads) = match name {
            "tiny" => (1, 32, 2),
            "small" => (2, 64, 4),
            "base" => (4, 128, 4),
            "check" => (2, 16, 2),
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder preset {other:?} (tiny, small, base, check)"
                )))
            }
        };
        let cfg = EncoderConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ff: 2 * d_model,
            max_len,
            dropout_rate: 0.0,
            preset_name: name.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("encoder sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_KEYS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2, &mut self.ln1_gain, &mut self.ln1_bias,
            &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        LAYER_KEYS.into_iter().zip(self.tensors())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors_mut().into_iter()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        let mut b = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        LayerVars {
            wq: b(&self.wq),
            wk: b(&self.wk),
            wv: b(&self.wv),
            wo: b(&self.wo),
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
            ln1_gain: b(&self.ln1_gain),
            ln1_bias: b(&self.ln1_bias),
            ln2_gain: b(&self.ln2_gain),
            ln2_bias: b(&self.ln2_bias),
        }
    }

    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        LayerParams {
            wq: uniform(rng, &[d, d], d),
            wk: uniform(rng, &[d, d], d),
            wv: uniform(rng, &[d, d], d),
            wo: uniform(rng, &[d, d], d),
            w1: uniform(rng, &[d, f], d),
            b1: Tensor::zeros(&[f]),
            w2: uniform(rng, &[f, d], f),
            b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 12] {
        [
            self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
            self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn all_mut(&mut self) -> Vec<&mut Var> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1, &mut l.w2,
                &mut l.b2, &mut l.ln1_gain, &mut l.ln1_bias, &mut l.ln2_gain, &mut l.ln2_bias,
            ]);
        }
        v
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend(l.all());
        }
        v
    }
}

/// Centered uniform with bound `1 / sqrt(fan_in)`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let tok_emb = uniform(&mut rng, &[config.vocab_size, d], d);
    let pos_emb = uniform(&mut rng, &[config.max_len, d], d);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams::init(config, &mut rng))
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    config: EncoderConfig,
    params: BTreeMap<String, Tensor>,
}

impl EncoderParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().map(|(k, t)| (format!("layers.{i}.{k}"), t)));
        }
        out
    }

    /// All tensors in the same order as [`EncoderVars::all`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.iter_mut());
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let b = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        EncoderVars {
            tok_emb: b(g, &self.tok_emb),
            pos_emb: b(g, &self.pos_emb),
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (k, t.clone()))
            .collect();
        Ok(serde_json::to_string(&Checkpoint {
            config: self.config.clone(),
            params,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let cfg = ck.config;
        cfg.validate()?;
        let mut params = ck.params;
        let mut take = |key: String, shape: &[usize]| -> Result<Tensor> {
            let t = params
                .remove(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {key}")))?;
            if t.shape() != shape {
                return Err(Error::Data(format!(
                    "checkpoint {key} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let tok_emb = take("tok_emb".into(), &[cfg.vocab_size, d])?;
        let pos_emb = take("pos_emb".into(), &[cfg.max_len, d])?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut k = |name: &str, shape: &[usize]| take(format!("layers.{i}.{name}"), shape);
            layers.push(LayerParams {
                wq: k("wq", &[d, d])?,
                wk: k("wk", &[d, d])?,
                wv: k("wv", &[d, d])?,
                wo: k("wo", &[d, d])?,
                w1: k("w1", &[d, f])?,
                b1: k("b1", &[f])?,
                w2: k("w2", &[f, d])?,
                b2: k("b2", &[d])?,
                ln1_gain: k("ln1_gain", &[d])?,
                ln1_bias: k("ln1_bias", &[d])?,
                ln2_gain: k("ln2_gain", &[d])?,
                ln2_bias: k("ln2_bias", &[d])?,
            });
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Data(format!("checkpoint has unknown key {extra}")));
        }
        Ok(EncoderParams {
            config: cfg,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pooled representation of one padded sequence (no gradient).
    pub fn encode(&self, seq: &EncodedSeq) -> Result<Tensor> {
        let out = self.encode_batch(std::slice::from_ref(seq))?;
        Tensor::vector(out.into_data())
    }

    /// Pooled representations `[B, d]` (no gradient).
    pub fn encode_batch(&self, batch: &[EncodedSeq]) -> Result<Tensor> {
        let states = self.run_layers(batch, self.layers.len())?;
        pool_tensor(&states, batch)
    }

    /// Token states `[B*T, d]` after the embeddings and the first
    /// `n_layers` layers (no gradient).
    pub fn run_layers(&self, batch: &[EncodedSeq], n_layers: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let tok = g.constant(&self.tok_emb);
        let pos = g.constant(&self.pos_emb);
        let mut x = embed(&mut g, tok, pos, batch)?;
        for layer in &self.layers[..n_layers] {
            let lv = layer.bind(&mut g, false);
            x = layer_forward(&mut g, &lv, x, batch, self.config.n_heads, None)?;
        }
        Ok(g.value(x).clone())
    }
}

/// Dropout applied in training forwards when the rate is positive.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant_owned(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn check_batch(batch: &[EncodedSeq]) -> Result<usize> {
    let t = batch
        .first()
        .map(|s| s.ids.len())
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for s in batch {
        if s.ids.len() != t || s.mask.len() != t {
            return Err(Error::InvalidArgument(
                "every sequence in a batch must share one padded length".into(),
            ));
        }
        if !s.mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "sequence has no real tokens (all positions masked)".into(),
            ));
        }
    }
    Ok(t)
}

/// Token plus position embeddings, `[B*T, d]`.
pub fn embed(g: &mut Graph, tok_emb: Var, pos_emb: Var, batch: &[EncodedSeq]) -> Result<Var> {
    let t = check_batch(batch)?;
    let (vocab, max_len) = (g.shape(tok_emb)[0], g.shape(pos_emb)[0]);
    if t > max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {t} exceeds max_len {max_len}"
        )));
    }
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t).collect();
    let tok = g.gather_rows(tok_emb, &ids)?;
    let pos = g.gather_rows(pos_emb, &positions)?;
    g.add(tok, pos)
}

/// Attention sublayer over a batch of sequences packed as `[B*T, d]`:
/// per-head scaled dot-product attention with padded keys masked out,
/// output projection, residual add, then layer norm.
///
/// Returns the sublayer output and, for each sequence and head, the
/// `[T, T]` attention weights.
pub fn attention_block(
    g: &mut Graph,
    lv: &LayerVars,
    x: Var,
    batch: &[EncodedSeq],
    n_heads: usize,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let t = check_batch(batch)?;
    let d = g.shape(x)[1];
    if !d.is_multiple_of(n_heads) {
        return Err(Error::InvalidArgument(format!(
            "d {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = g.matmul(x, lv.wq)?;
    let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = g.matmul(x, lv.wk)?;
    let v = g.matmul(x, lv.wv)?;

    let mut seq_outputs = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (b, seq) in batch.iter().enumerate() {
        let rows = b * t..(b + 1) * t;
        let mut heads = Vec::with_capacity(n_heads);
        let mut seq_weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = g.block(q, rows.clone(), cols.clone())?;
            let kh = g.block(k, rows.clone(), cols.clone())?;
            let vh = g.block(v, rows.clone(), cols)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let attn = g.masked_softmax(scores, &seq.mask)?;
            seq_weights.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        weights.push(seq_weights);
        seq_outputs.push(if n_heads == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        });
    }
    let ctx = if seq_outputs.len() == 1 {
        seq_outputs[0]
    } else {
        g.concat(&seq_outputs, 0)?
    };
    let mut out = g.matmul(ctx, lv.wo)?;
    if let Some(dr) = dropout {
        out = dr.apply(g, out)?;
    }
    let res = g.add(x, out)?;
    let y = g.layer_norm(res, lv.ln1_gain, lv.ln1_bias, LAYER_NORM_EPS)?;
    Ok((y, weights))
}

/// Single-sequence attention sublayer on `[T, d]`.
pub fn self_attention(g: &mut Graph, lv: &LayerVars, x: Var, mask: &[bool], n_heads: usize) -> Result<Var> {
    let seq = EncodedSeq {
        ids: vec![0; mask.len()],
        mask: mask.to_vec(),
    };
    if g.shape(x)[0] != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            lhs: g.shape(x).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(attention_block(g, lv, x, std::slice::from_ref(&seq), n_heads, None)?.0)
}

/// One encoder layer: attention sublayer then ReLU feed-forward sublayer,
/// each followed by residual add and layer norm.
pub fn layer_forward(
    g: &mut Graph,
    lv: &LayerVars,
    x: Var,
    batch: &[EncodedSeq],
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let (x, _) = attention_block(g, lv, x, batch, n_heads, dropout.as_deref_mut())?;
    let h = g.matmul(x, lv.w1)?;
    let h = g.add_bias(h, lv.b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, lv.w2)?;
    let mut h = g.add_bias(h, lv.b2)?;
    if let Some(dr) = dropout {
        h = dr.apply(g, h)?;
    }
    let res = g.add(x, h)?;
    g.layer_norm(res, lv.ln2_gain, lv.ln2_bias, LAYER_NORM_EPS)
}

/// `[B, B*T]` matrix averaging each sequence's real token states.
fn pooling_matrix(batch: &[EncodedSeq]) -> Result<Tensor> {
    let t = check_batch(batch)?;
    let bsz = batch.len();
    let mut data = vec![0.0; bsz * bsz * t];
    for (b, seq) in batch.iter().enumerate() {
        let w = 1.0 / seq.real_len() as f64;
        for (j, &m) in seq.mask.iter().enumerate() {
            if m {
                data[b * bsz * t + b * t + j] = w;
            }
        }
    }
    Tensor::matrix(bsz, bsz * t, data)
}

/// Masked mean pooling: `[B*T, d]` states to `[B, d]`.
pub fn pool(g: &mut Graph, states: Var, batch: &[EncodedSeq]) -> Result<Var> {
    let p = g.constant_owned(pooling_matrix(batch)?);
    g.matmul(p, states)
}

fn pool_tensor(states: &Tensor, batch: &[EncodedSeq]) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(states);
    let out = pool(&mut g, s, batch)?;
    Ok(g.value(out).clone())
}

/// Full forward on a graph: embeddings, all layers, pooling. `[B, d]`.
pub fn forward(
    g: &mut Graph,
    vars: &EncoderVars,
    batch: &[EncodedSeq],
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let mut x = embed(g, vars.tok_emb, vars.pos_emb, batch)?;
    for lv in &vars.layers {
        x = layer_forward(g, lv, x, batch, n_heads, dropout.as_deref_mut())?;
    }
    pool(g, x, batch)
}

/// Runs `layers` on cached token states and pools. `[B, d]`.
pub fn forward_top(
    g: &mut Graph,
    layers: &[LayerVars],
    states: Var,
    batch: &[EncodedSeq],
    n_heads: usize,
) -> Result<Var> {
    let mut x = states;
    for lv in layers {
        x = layer_forward(g, lv, x, batch, n_heads, None)?;
    }
    pool(g, x, batch)
}

#[cfg(test)]
mod tests;

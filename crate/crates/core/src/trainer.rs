//! Adam, per-episode adaptation on the support set, and episodic
//! meta-training of the encoder.
//!
//! Meta-training is first order: each episode fits a fresh head on the
//! support features with the encoder frozen, then takes one Adam step on
//! every encoder parameter for the total loss over support and query with
//! that head held fixed.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{forward, forward_top, Dropout, EncoderParams, LayerParams};
use crate::episodes::{derive_seed, episode_at, Episode, Protocol};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, cross_entropy, l2_regularization, total_loss, ContrastiveNumerator,
    LossBreakdown, LossWeights,
};
use crate::text::{Dataset, EncodedSeq, Example};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates and step count, one slot per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len(), state.m.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub meta_train_episodes: usize,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub unfreeze_top_layers: usize,
    pub loss: LossWeights,
    pub contrastive_numerator: ContrastiveNumerator,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            meta_train_episodes: 500,
            fine_tune_steps: 20,
            fine_tune_lr: 1e-2,
            unfreeze_top_layers: 1,
            loss: LossWeights::default(),
            contrastive_numerator: ContrastiveNumerator::Positives,
            eval_episodes: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("fine_tune_lr", self.fine_tune_lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.fine_tune_steps == 0 {
            return Err(Error::Config("fine_tune_steps must be ≥ 1".into()));
        }
        self.loss.validate()
    }

    pub fn meta_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn inner_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.fine_tune_lr,
            ..self.meta_adam()
        }
    }
}

/// Linear classifier from pooled features to episode logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `[d, N]`
    pub weight: Tensor,
    /// `[N]`
    pub bias: Tensor,
}

impl Head {
    pub fn zeros(d: usize, way: usize) -> Self {
        Head {
            weight: Tensor::zeros(&[d, way]),
            bias: Tensor::zeros(&[way]),
        }
    }

    pub fn way(&self) -> usize {
        self.bias.numel()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features);
        let out = apply_head(&mut g, f, self, false)?.0;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?))
    }
}

fn apply_head(g: &mut Graph, features: Var, head: &Head, trainable: bool) -> Result<(Var, [Var; 2])> {
    let (w, b) = if trainable {
        (g.param(&head.weight), g.param(&head.bias))
    } else {
        (g.constant(&head.weight), g.constant(&head.bias))
    };
    let z = g.matmul(features, w)?;
    Ok((g.add_bias(z, b)?, [w, b]))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.outer_rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Encodes with entity markers, then trims shared padding down to the
/// longest sequence in the batch.
pub fn encode_examples(examples: &[&Example], max_len: usize) -> Result<Vec<EncodedSeq>> {
    let mut seqs = examples
        .iter()
        .map(|e| e.encode(max_len))
        .collect::<Result<Vec<_>>>()?;
    let longest = seqs.iter().map(EncodedSeq::real_len).max().unwrap_or(0);
    for s in &mut seqs {
        s.ids.truncate(longest);
        s.mask.truncate(longest);
    }
    Ok(seqs)
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect()
}

/// Fits a zero-initialised head on fixed features with cross-entropy plus
/// `lambda_reg` times the head's squared norm. Returns the head and the
/// support loss before each step.
pub fn fit_head(
    features: &Tensor,
    labels: &[usize],
    way: usize,
    steps: usize,
    lambda_reg: f64,
    adam: &AdamConfig,
) -> Result<(Head, Vec<f64>)> {
    let mut head = Head::zeros(features.last_dim(), way);
    let mut state = AdamState::new([&head.weight, &head.bias]);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let f = g.constant(features);
        let (logits, vars) = apply_head(&mut g, f, &head, true)?;
        let ce = cross_entropy(&mut g, logits, labels)?;
        let reg = l2_regularization(&mut g, &vars)?;
        let weighted = g.scale(reg, lambda_reg)?;
        let total = g.add(ce, weighted)?;
        losses.push(g.value(total).item());
        g.backward(total)?;
        let grads = grads_of(&g, &vars);
        adam_step(&mut [&mut head.weight, &mut head.bias], &grads, &mut state, adam)?;
    }
    Ok((head, losses))
}

/// Result of adapting to one episode's support set. The shared encoder is
/// untouched; adapted copies of its top layers live here.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub head: Head,
    pub top_layers: Vec<LayerParams>,
    /// Loss components before each step.
    pub trace: Vec<LossBreakdown>,
}

impl Adapted {
    /// Pooled features of `examples` through the frozen prefix and the
    /// adapted top layers.
    pub fn features(&self, encoder: &EncoderParams, examples: &[&Example]) -> Result<Tensor> {
        let seqs = encode_examples(examples, encoder.config.max_len)?;
        let n_frozen = encoder.layers.len() - self.top_layers.len();
        let prefix = encoder.run_layers(&seqs, n_frozen)?;
        let mut g = Graph::new();
        let s = g.constant(&prefix);
        let top: Vec<_> = self.top_layers.iter().map(|l| l.bind(&mut g, false)).collect();
        let pooled = forward_top(&mut g, &top, s, &seqs, encoder.config.n_heads)?;
        Ok(g.value(pooled).clone())
    }

    pub fn predict(&self, encoder: &EncoderParams, examples: &[&Example]) -> Result<Vec<usize>> {
        self.head.predict(&self.features(encoder, examples)?)
    }
}

/// Adapts a zero head plus the top `unfreeze_top_layers` encoder layers to
/// the support set for `fine_tune_steps` Adam steps on
/// `ce + lambda_reg * |trainable|^2 + beta * contrastive`.
pub fn fine_tune_on_support(encoder: &EncoderParams, episode: &Episode, config: &TrainConfig) -> Result<Adapted> {
    if episode.support.is_empty() {
        return Err(Error::InvalidArgument("episode has an empty support set".into()));
    }
    let n_layers = encoder.layers.len();
    let n_top = config.unfreeze_top_layers.min(n_layers);
    let seqs = encode_examples(&episode.support_examples(), encoder.config.max_len)?;
    let labels = episode.support_labels();
    let prefix = encoder.run_layers(&seqs, n_layers - n_top)?;

    let mut top: Vec<LayerParams> = encoder.layers[n_layers - n_top..].to_vec();
    let mut head = Head::zeros(encoder.config.d_model, episode.way);
    let mut state = AdamState::new(
        [&head.weight, &head.bias]
            .into_iter()
            .chain(top.iter().flat_map(|l| l.named().map(|(_, t)| t))),
    );
    let adam = config.inner_adam();
    let use_cl = config.loss.beta > 0.0 && labels.len() >= 2;
    let mut trace = Vec::with_capacity(config.fine_tune_steps);

    for _ in 0..config.fine_tune_steps {
        let mut g = Graph::new();
        let s = g.constant(&prefix);
        let top_vars: Vec<_> = top.iter().map(|l| l.bind(&mut g, true)).collect();
        let feats = forward_top(&mut g, &top_vars, s, &seqs, encoder.config.n_heads)?;
        let (logits, head_vars) = apply_head(&mut g, feats, &head, true)?;
        let mut trainable = head_vars.to_vec();
        trainable.extend(top_vars.iter().flat_map(|lv| lv.all()));

        let ce = cross_entropy(&mut g, logits, &labels)?;
        let reg = l2_regularization(&mut g, &trainable)?;
        let (cl, n_anchors) = if use_cl {
            contrastive_loss(&mut g, feats, &labels, config.loss.tau, config.contrastive_numerator)?
        } else {
            (g.scalar(0.0), 0)
        };
        let (total, breakdown) = total_loss(&mut g, ce, reg, cl, n_anchors, &config.loss)?;
        trace.push(breakdown);
        g.backward(total)?;
        let grads = grads_of(&g, &trainable);
        let mut params: Vec<&mut Tensor> = vec![&mut head.weight, &mut head.bias];
        params.extend(top.iter_mut().flat_map(|l| l.iter_mut()));
        adam_step(&mut params, &grads, &mut state, &adam)?;
    }
    Ok(Adapted {
        head,
        top_layers: top,
        trace,
    })
}

/// Anything that can adapt to a support set and label the queries.
pub trait EpisodeLearner: Sync {
    fn predict_episode(&self, episode: &Episode, config: &TrainConfig) -> Result<Vec<usize>>;
}

impl EpisodeLearner for EncoderParams {
    fn predict_episode(&self, episode: &Episode, config: &TrainConfig) -> Result<Vec<usize>> {
        fine_tune_on_support(self, episode, config)?.predict(self, &episode.query_examples())
    }
}

/// Learner over a fixed feature map: only a head is fitted per episode.
pub struct FixedFeatures<F>(pub F);

impl<F> EpisodeLearner for FixedFeatures<F>
where
    F: Fn(&Example) -> Vec<f64> + Sync,
{
    fn predict_episode(&self, episode: &Episode, config: &TrainConfig) -> Result<Vec<usize>> {
        let rows = |items: Vec<&Example>| Tensor::from_rows(&items.into_iter().map(&self.0).collect::<Vec<_>>());
        let (head, _) = fit_head(
            &rows(episode.support_examples())?,
            &episode.support_labels(),
            episode.way,
            config.fine_tune_steps,
            config.loss.lambda_reg,
            &config.inner_adam(),
        )?;
        head.predict(&rows(episode.query_examples())?)
    }
}

/// One line of the meta-training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub episode: usize,
    pub ce: f64,
    pub reg: f64,
    pub cl: f64,
    pub total: f64,
    pub query_acc: f64,
}

pub fn write_train_log(path: impl AsRef<Path>, records: &[TrainRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn diverged(episode: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Diverged { episode },
        other => Error::in_episode(episode, other),
    }
}

/// Episodic meta-training from `init`. Deterministic given the config seed.
pub fn meta_train(
    init: &EncoderParams,
    dataset: &Dataset,
    protocol: &Protocol,
    config: &TrainConfig,
) -> Result<(EncoderParams, Vec<TrainRecord>)> {
    config.validate()?;
    crate::episodes::check_dataset(dataset, protocol)?;
    let mut params = init.clone();
    let mut state = AdamState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let episode_seed = derive_seed(config.seed, "meta-train episodes");
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
    let mut log = Vec::with_capacity(config.meta_train_episodes);

    for t in 0..config.meta_train_episodes {
        let episode = episode_at(dataset, protocol, episode_seed, t)?;
        let record = meta_step(&mut params, &mut state, &episode, config, &mut dropout_rng, t)
            .map_err(|e| diverged(t, e))?;
        log.push(record);
    }
    Ok((params, log))
}

fn meta_step(
    params: &mut EncoderParams,
    state: &mut AdamState,
    episode: &Episode,
    config: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
    t: usize,
) -> Result<TrainRecord> {
    let max_len = params.config.max_len;
    let n_support = episode.support.len();
    let support_seqs = encode_examples(&episode.support_examples(), max_len)?;
    let support_labels = episode.support_labels();
    let (head, _) = fit_head(
        &params.encode_batch(&support_seqs)?,
        &support_labels,
        episode.way,
        config.fine_tune_steps,
        config.loss.lambda_reg,
        &config.inner_adam(),
    )?;

    let all_examples: Vec<&Example> = episode
        .support_examples()
        .into_iter()
        .chain(episode.query_examples())
        .collect();
    let seqs = encode_examples(&all_examples, max_len)?;
    let mut labels = support_labels;
    labels.extend(episode.query_labels());

    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let mut dropout = Dropout {
        rate: params.config.dropout_rate,
        rng: dropout_rng,
    };
    let h = forward(&mut g, &vars, &seqs, params.config.n_heads, Some(&mut dropout))?;
    let (logits, _) = apply_head(&mut g, h, &head, false)?;
    let all_vars = vars.all();
    let ce = cross_entropy(&mut g, logits, &labels)?;
    let reg = l2_regularization(&mut g, &all_vars)?;
    let (cl, n_anchors) = contrastive_loss(&mut g, h, &labels, config.loss.tau, config.contrastive_numerator)?;
    let (total, b) = total_loss(&mut g, ce, reg, cl, n_anchors, &config.loss)?;
    if !b.total.is_finite() {
        return Err(Error::Diverged { episode: t });
    }

    let predicted = argmax_rows(g.value(logits));
    let correct = predicted[n_support..]
        .iter()
        .zip(&labels[n_support..])
        .filter(|(p, y)| p == y)
        .count();
    let query_acc = correct as f64 / (labels.len() - n_support) as f64;

    g.backward(total)?;
    let grads = grads_of(&g, &all_vars);
    adam_step(&mut params.tensors_mut(), &grads, state, &config.meta_adam())?;
    if params.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged { episode: t });
    }
    Ok(TrainRecord {
        episode: t,
        ce: b.ce,
        reg: b.reg,
        cl: b.cl,
        total: b.total,
        query_acc,
    })
}

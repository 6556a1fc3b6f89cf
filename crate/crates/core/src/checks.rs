//! Finite-difference checks of every loss and of a small encoder under the
//! full weighted objective.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_entries, Graph, Tensor, Var};
use crate::encoder::{forward, init_encoder, EncoderConfig};
use crate::episodes::derive_seed;
use crate::error::Result;
use crate::losses::{
    contrastive_loss, cross_entropy, l2_regularization, total_loss, ContrastiveNumerator, LossWeights,
};
use crate::text::EncodedSeq;

pub const GRADCHECK_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Entries passed over because the objective has a kink within one step.
    pub skipped_entries: usize,
    pub pass: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("shape and data agree")
}

/// Labels in `0..classes` where every class appears at least twice.
fn paired_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}

fn row(name: &str, trials: usize, errors: &[f64], tol: f64) -> CheckRow {
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    CheckRow {
        name: name.to_string(),
        trials,
        max_rel_error,
        skipped_entries: 0,
        pass: errors.len() == trials && max_rel_error < tol,
    }
}

/// Runs `trials` randomized checks per row. Each trial draws fresh inputs.
pub fn run_gradient_checks(trials: usize, seed: u64, tol: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cross entropy"));
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (b, c) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let logits = random(&mut rng, &[b, c], 4.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        errs.push(grad_check(|g, v| cross_entropy(g, v, &labels), &logits, STEP)?);
    }
    rows.push(row("cross_entropy", trials, &errs, tol));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "l2"));
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let shape = [rng.gen_range(1..5), rng.gen_range(1..5)];
        let theta = random(&mut rng, &shape, 3.0);
        errs.push(grad_check(|g, v| l2_regularization(g, &[v]), &theta, STEP)?);
    }
    rows.push(row("l2_regularization", trials, &errs, tol));

    for (name, numerator) in [
        ("contrastive_positives", ContrastiveNumerator::Positives),
        ("contrastive_literal", ContrastiveNumerator::Literal),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let mut errs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let b = rng.gen_range(4..9);
            let d = rng.gen_range(2..7);
            let emb = random(&mut rng, &[b, d], 1.0);
            let classes = rng.gen_range(2..4);
            let labels = paired_labels(&mut rng, b, classes);
            let tau = rng.gen_range(0.1..1.0);
            errs.push(grad_check(
                |g, v| Ok(contrastive_loss(g, v, &labels, tau, numerator)?.0),
                &emb,
                STEP,
            )?);
        }
        rows.push(row(name, trials, &errs, tol));
    }

    rows.push(encoder_row(trials, seed, tol)?);
    Ok(rows)
}

fn value_at<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.constant(x);
    let out = f(&mut g, leaf)?;
    Ok(g.value(out).item())
}

fn central_difference<F>(f: &F, x: &Tensor, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    probe.data_mut()[i] += h;
    let plus = value_at(f, &probe)?;
    probe.data_mut()[i] = x.data()[i] - h;
    let minus = value_at(f, &probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Takes up to `want` entries from `order` at which the objective is smooth
/// on the scale of the finite-difference step: central differences at `h`
/// and `h / 10` must agree. A ReLU switching inside `[x - h, x + h]` breaks
/// that agreement. Returns the kept entries and how many were passed over.
fn smooth_entries<F>(f: &F, x: &Tensor, order: &[usize], want: usize) -> Result<(Vec<usize>, usize)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut kept = Vec::with_capacity(want);
    let mut skipped = 0;
    for &i in order {
        if kept.len() == want {
            break;
        }
        let coarse = central_difference(f, x, i, STEP)?;
        let fine = central_difference(f, x, i, STEP / 10.0)?;
        if (coarse - fine).abs() <= 1e-6 * coarse.abs().max(1.0) {
            kept.push(i);
        } else {
            skipped += 1;
        }
    }
    Ok((kept, skipped))
}

/// Two-layer, width-16 encoder with a linear head under
/// `ce + 0.5 reg + 0.5 contrastive`. Each trial picks one parameter tensor
/// (cycling through all of them) and checks eight of its entries, skipping
/// entries that sit within one step of a ReLU kink.
fn encoder_row(trials: usize, seed: u64, tol: f64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder"));
    let (vocab, max_len, batch, classes) = (20, 8, 4, 2);
    let weights = LossWeights { lambda_reg: 0.5, beta: 0.5, tau: 0.5 };
    let mut errs = Vec::with_capacity(trials);
    let mut skipped_entries = 0;
    for trial in 0..trials {
        let cfg = EncoderConfig::preset("check", vocab, max_len)?;
        let params = init_encoder(&cfg, rng.gen())?;
        let seqs: Vec<EncodedSeq> = (0..batch)
            .map(|_| {
                let len = rng.gen_range(2..=max_len);
                EncodedSeq {
                    ids: (0..max_len).map(|i| if i < len { rng.gen_range(6..vocab) } else { 0 }).collect(),
                    mask: (0..max_len).map(|i| i < len).collect(),
                }
            })
            .collect();
        let labels = paired_labels(&mut rng, batch, classes);
        let head = random(&mut rng, &[cfg.d_model, classes], 1.0);

        let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let which = trial % tensors.len();
        let target = &tensors[which];
        let order = index::sample(&mut rng, target.numel(), target.numel()).into_vec();
        let objective = |g: &mut Graph, leaf: Var| {
            let mut vars = params.bind(g, false);
            *vars.all_mut()[which] = leaf;
            let h = forward(g, &vars, &seqs, cfg.n_heads, None)?;
            let w = g.constant(&head);
            let logits = g.matmul(h, w)?;
            let ce = cross_entropy(g, logits, &labels)?;
            let reg = l2_regularization(g, &vars.all())?;
            let (cl, n) = contrastive_loss(g, h, &labels, weights.tau, ContrastiveNumerator::Positives)?;
            Ok(total_loss(g, ce, reg, cl, n, &weights)?.0)
        };
        let (entries, skipped) = smooth_entries(&objective, target, &order, 8)?;
        skipped_entries += skipped;
        errs.push(grad_check_entries(objective, target, &entries, STEP)?);
    }
    let mut r = row("encoder_total_loss", trials, &errs, tol);
    r.skipped_entries = skipped_entries;
    Ok(r)
}

//! Training objective: cross-entropy, L2 penalty, supervised contrastive
//! loss over cosine similarities, and their weighted total
//! `ce + lambda_reg * reg + beta * cl`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.0,
            beta: 0.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_reg: f64, beta: f64, tau: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_reg,
            beta,
            tau,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_reg must be ≥ 0, got {}",
                self.lambda_reg
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Which same-anchor set sits in the contrastive numerator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveNumerator {
    /// Same-category batch-mates (standard supervised contrastive form).
    #[default]
    Positives,
    /// Different-category batch-mates, as the formula is typeset.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub cl: f64,
    pub total: f64,
    pub n_anchors_used: usize,
}

impl LossBreakdown {
    /// Combines unweighted components.
    pub fn combine(ce: f64, reg: f64, cl: f64, n_anchors_used: usize, w: &LossWeights) -> Self {
        LossBreakdown {
            ce,
            reg,
            cl,
            total: ce + w.lambda_reg * reg + w.beta * cl,
            n_anchors_used,
        }
    }
}

/// Summed negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::InvalidArgument(format!(
            "logits must be [B, C], got {shape:?}"
        )));
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, labels)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0)
}

/// Unweighted squared L2 norm over every entry of `params`.
pub fn l2_regularization(g: &mut Graph, params: &[Var]) -> Result<Var> {
    let (&first, rest) = params
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("l2_regularization needs ≥1 parameter".into()))?;
    let mut acc = g.sum_squares(first)?;
    for &p in rest {
        let s = g.sum_squares(p)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Supervised contrastive loss over cosine similarities of `embeddings`
/// `[B, d]`. Returns the loss summed over anchors and the number of anchors
/// that had a non-empty numerator set.
pub fn contrastive_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
    numerator: ContrastiveNumerator,
) -> Result<(Var, usize)> {
    let unit = g.normalize_rows(embeddings)?;
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(unit, unit_t)?;
    contrastive_from_similarities(g, sim, labels, tau, numerator)
}

/// Contrastive loss from a precomputed `[B, B]` similarity matrix.
///
/// For anchor `i`, with `P(i)` / `N(i)` its same / different category
/// batch-mates (never `i` itself):
/// `loss_i = -log( Σ_{j∈num(i)} e^{s_ij/τ} / Σ_{j∈P(i)∪N(i)} e^{s_ij/τ} )`
/// where `num(i)` is `P(i)` or `N(i)` per `numerator`. Anchors with an
/// empty `num(i)` are skipped.
pub fn contrastive_from_similarities(
    g: &mut Graph,
    sim: Var,
    labels: &[usize],
    tau: f64,
    numerator: ContrastiveNumerator,
) -> Result<(Var, usize)> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of ≥2, got {b}"
        )));
    }
    if g.shape(sim) != [b, b] {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: g.shape(sim).to_vec(),
            rhs: vec![b, b],
        });
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }

    let mut den_mask = vec![false; b * b];
    let mut num_mask = vec![false; b * b];
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            den_mask[i * b + j] = true;
            num_mask[i * b + j] = match numerator {
                ContrastiveNumerator::Positives => labels[i] == labels[j],
                ContrastiveNumerator::Literal => labels[i] != labels[j],
            };
        }
    }
    let eligible: Vec<f64> = (0..b)
        .map(|i| {
            let any = num_mask[i * b..(i + 1) * b].iter().any(|&m| m);
            if any {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let n_anchors = eligible.iter().filter(|&&e| e > 0.0).count();
    if n_anchors == 0 {
        return Ok((g.scalar(0.0), 0));
    }

    let scaled = g.scale(sim, 1.0 / tau)?;
    let den = g.masked_log_sum_exp(scaled, &den_mask)?;
    let num = g.masked_log_sum_exp(scaled, &num_mask)?;
    let per_anchor = g.sub(den, num)?;
    let keep = g.constant_owned(Tensor::vector(eligible)?);
    let kept = g.mul(per_anchor, keep)?;
    Ok((g.sum(kept)?, n_anchors))
}

/// `ce + lambda_reg * reg + beta * cl` on the graph, plus the recorded
/// component values.
pub fn total_loss(
    g: &mut Graph,
    ce: Var,
    reg: Var,
    cl: Var,
    n_anchors_used: usize,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let weighted_reg = g.scale(reg, w.lambda_reg)?;
    let weighted_cl = g.scale(cl, w.beta)?;
    let partial = g.add(ce, weighted_reg)?;
    let total = g.add(partial, weighted_cl)?;
    let breakdown = LossBreakdown {
        ce: g.value(ce).item(),
        reg: g.value(reg).item(),
        cl: g.value(cl).item(),
        total: g.value(total).item(),
        n_anchors_used,
    };
    Ok((total, breakdown))
}

//! Episode evaluation, per-relation difficulty tables, loss-weight sweeps
//! and their CSV exports.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::episodes::{check_dataset, derive_seed, episode_at, Protocol};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::text::Dataset;
use crate::trainer::{meta_train, EpisodeLearner, TrainConfig, TrainRecord};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub label: usize,
    pub predicted: usize,
    pub relation_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub queries: Vec<QueryRecord>,
    pub accuracy: f64,
}

impl EpisodeResult {
    pub fn correct(&self) -> usize {
        self.queries.iter().filter(|q| q.label == q.predicted).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub n_queries: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_fingerprint: String,
    pub preset: String,
    pub protocol: Protocol,
    pub n_episodes: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub per_relation: BTreeMap<String, ClassAccuracy>,
    pub note: String,
    /// Raw per-episode records; kept out of the serialized report.
    #[serde(skip)]
    pub results: Vec<EpisodeResult>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const SYNTHETIC_NOTE: &str = "desk-scale run: tiny encoders trained from scratch; \
compare directions and shapes, not absolute accuracies of large pretrained models";

/// Mean and 95% normal-approximation half-width.
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * (var / n as f64).sqrt())
}

/// sha256 of the canonical JSON of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let canonical: serde_json::Value = serde_json::to_value(value)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&canonical)?);
    Ok(hex::encode(h.finalize()))
}

/// Adapts and predicts on episodes `0..n_episodes` of the stream seeded by
/// `seed`. Episodes run in parallel; results are kept in index order.
pub fn evaluate<L: EpisodeLearner + ?Sized>(
    learner: &L,
    dataset: &Dataset,
    protocol: &Protocol,
    n_episodes: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<RunReport> {
    if n_episodes == 0 {
        return Err(Error::Config("protocol requires ≥1 episode".into()));
    }
    check_dataset(dataset, protocol)?;
    let results = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = episode_at(dataset, protocol, seed, i)?;
            let predicted = learner
                .predict_episode(&ep, config)
                .map_err(|e| Error::in_episode(i, e))?;
            if predicted.len() != ep.query.len() {
                return Err(Error::in_episode(
                    i,
                    Error::InvalidArgument(format!(
                        "{} predictions for {} queries",
                        predicted.len(),
                        ep.query.len()
                    )),
                ));
            }
            let queries: Vec<QueryRecord> = ep
                .query
                .iter()
                .zip(predicted)
                .map(|(it, p)| QueryRecord {
                    label: it.label,
                    predicted: p,
                    relation_id: ep.relation_ids[it.label].clone(),
                })
                .collect();
            let correct = queries.iter().filter(|q| q.label == q.predicted).count();
            Ok(EpisodeResult {
                index: i,
                accuracy: correct as f64 / queries.len() as f64,
                queries,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci_half_width) = mean_and_half_width(&accs);
    Ok(RunReport {
        config_fingerprint: fingerprint(&(config, protocol, n_episodes, seed))?,
        preset: String::new(),
        protocol: *protocol,
        n_episodes,
        seed,
        mean_accuracy,
        ci_half_width,
        per_relation: per_class_accuracy(&results),
        note: SYNTHETIC_NOTE.to_string(),
        results,
    })
}

/// Query accuracy per global relation id, pooled over episodes.
pub fn per_class_accuracy(results: &[EpisodeResult]) -> BTreeMap<String, ClassAccuracy> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in results.iter().flat_map(|r| &r.queries) {
        let c = counts.entry(q.relation_id.clone()).or_default();
        c.0 += 1;
        c.1 += usize::from(q.label == q.predicted);
    }
    counts
        .into_iter()
        .map(|(rel, (n, correct))| {
            let acc = ClassAccuracy {
                n_queries: n,
                correct,
                accuracy: correct as f64 / n as f64,
            };
            (rel, acc)
        })
        .collect()
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut p = 0.0;
    let mut choose = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            choose = choose * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += choose;
        }
    }
    p / 2f64.powi(n as i32)
}

/// Everything needed for one train-then-evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub preset: String,
    pub max_len: usize,
    pub protocol: Protocol,
    pub n_eval_episodes: usize,
    pub train: TrainConfig,
}

pub struct Trained {
    pub encoder: EncoderParams,
    pub log: Vec<TrainRecord>,
    pub report: RunReport,
}

pub fn initial_encoder(setup: &ExperimentSetup, vocab_size: usize) -> Result<EncoderParams> {
    let cfg = EncoderConfig::preset(&setup.preset, vocab_size, setup.max_len)?;
    init_encoder(&cfg, derive_seed(setup.train.seed, "encoder init"))
}

/// Initialises an encoder, meta-trains it on `train` and evaluates it on
/// `eval`. All randomness derives from `setup.train.seed`.
pub fn train_and_evaluate(train: &Dataset, eval: &Dataset, setup: &ExperimentSetup) -> Result<Trained> {
    let init = initial_encoder(setup, train.vocab.len())?;
    let (encoder, log) = meta_train(&init, train, &setup.protocol, &setup.train)?;
    let mut report = evaluate(
        &encoder,
        eval,
        &setup.protocol,
        setup.n_eval_episodes,
        derive_seed(setup.train.seed, "evaluation episodes"),
        &setup.train,
    )?;
    report.preset = setup.preset.clone();
    report.config_fingerprint = fingerprint(setup)?;
    Ok(Trained { encoder, log, report })
}

pub struct SweepCell {
    pub weights: LossWeights,
    pub outcome: Result<RunReport>,
}

/// Full train and evaluate per grid cell with identical seeds across cells.
/// A failing cell is recorded and the sweep moves on.
pub fn ablation_sweep(train: &Dataset, eval: &Dataset, setup: &ExperimentSetup, grid: &[LossWeights]) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|&weights| {
            let mut cell = setup.clone();
            cell.train.loss = weights;
            SweepCell {
                weights,
                outcome: train_and_evaluate(train, eval, &cell).map(|t| t.report),
            }
        })
        .collect())
}

/// The five weight settings of the reference ablation (cross-entropy weight 1).
pub fn reference_grid(tau: f64) -> Vec<LossWeights> {
    [(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]
        .into_iter()
        .map(|(lambda_reg, beta)| LossWeights { lambda_reg, beta, tau })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_protocol_csv(path: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["preset", "N", "K", "mean_acc", "ci"])?;
    for r in reports {
        w.write_record([
            r.preset.clone(),
            r.protocol.way.to_string(),
            r.protocol.shot.to_string(),
            r.mean_accuracy.to_string(),
            r.ci_half_width.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_per_class_csv(path: impl AsRef<Path>, table: &BTreeMap<String, ClassAccuracy>) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["relation_id", "n_queries", "accuracy"])?;
    for (rel, c) in table {
        w.write_record([rel.clone(), c.n_queries.to_string(), c.accuracy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Failed cells keep their weights and leave the result columns empty.
pub fn write_ablation_csv(path: impl AsRef<Path>, cells: &[SweepCell]) -> Result<()> {
    let rows: Vec<_> = cells
        .iter()
        .map(|c| (c.weights, c.outcome.as_ref().ok().map(|r| (r.mean_accuracy, r.ci_half_width))))
        .collect();
    write_ablation_rows(path, &rows)
}

/// One row per weight setting with `(mean accuracy, CI half-width)`, or
/// empty result columns for `None`.
pub fn write_ablation_rows(path: impl AsRef<Path>, rows: &[(LossWeights, Option<(f64, f64)>)]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["lambda", "beta", "tau", "mean_acc", "ci"])?;
    for (weights, summary) in rows {
        let (acc, ci) = summary.map_or((String::new(), String::new()), |(a, c)| (a.to_string(), c.to_string()));
        w.write_record([
            weights.lambda_reg.to_string(),
            weights.beta.to_string(),
            weights.tau.to_string(),
            acc,
            ci,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

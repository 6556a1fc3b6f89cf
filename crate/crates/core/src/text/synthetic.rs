//! Synthetic relation data with a controllable amount of class overlap.
//!
//! Words are `w00000 .. w{vocab_size-1}`. With `n` relations the vocabulary
//! is cut into `n + 1` blocks of `P = vocab_size / (n + 1)` words. Block 0
//! is the shared reservoir; block `r + 1` belongs to relation `r`. Relation
//! `r` with overlap `o` draws from the first `round(o * P)` shared words plus
//! the first `P - round(o * P)` words of its own block, so `o = 0` gives
//! disjoint pools and `o = 1` gives identical ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Example, Span};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_relations: usize,
    pub per_relation: usize,
    pub vocab_size: usize,
    /// Shared fraction of every relation's pool, in `[0, 1]`.
    pub overlap: f64,
    /// Per-relation overlap, replacing `overlap` when present.
    #[serde(default)]
    pub overlaps: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_min_tokens() -> usize {
    6
}

fn default_max_tokens() -> usize {
    12
}

impl SyntheticSpec {
    pub fn new(n_relations: usize, per_relation: usize, vocab_size: usize, overlap: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_relations,
            per_relation,
            vocab_size,
            overlap,
            overlaps: None,
            seed,
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
        }
    }

    pub fn relation_overlaps(&self) -> Vec<f64> {
        self.overlaps
            .clone()
            .unwrap_or_else(|| vec![self.overlap; self.n_relations])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_relations == 0 || self.per_relation == 0 {
            return bad("synthetic data needs ≥1 relation and ≥1 example per relation".into());
        }
        if self.vocab_size <= self.n_relations * 3 {
            return bad(format!(
                "vocab_size {} must exceed 3 × n_relations ({})",
                self.vocab_size,
                self.n_relations * 3
            ));
        }
        let overlaps = self.relation_overlaps();
        if overlaps.len() != self.n_relations {
            return bad(format!(
                "{} per-relation overlaps given for {} relations",
                overlaps.len(),
                self.n_relations
            ));
        }
        if overlaps.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return bad("overlap must lie in [0, 1]".into());
        }
        if self.min_tokens < 2 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "sentence length range {}..={} invalid (need 2 ≤ min ≤ max)",
                self.min_tokens, self.max_tokens
            ));
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        self.vocab_size / (self.n_relations + 1)
    }

    /// Word indices each relation draws from.
    pub fn pools(&self) -> Vec<BTreeSet<usize>> {
        let p = self.pool_size();
        self.relation_overlaps()
            .iter()
            .enumerate()
            .map(|(r, &o)| {
                let shared = ((o * p as f64).round() as usize).min(p);
                let own_start = (r + 1) * p;
                (0..shared).chain(own_start..own_start + (p - shared)).collect()
            })
            .collect()
    }

    pub fn relation_id(r: usize) -> String {
        format!("S{r:03}")
    }
}

pub fn word(i: usize) -> String {
    format!("w{i:05}")
}

pub fn generate_synthetic(
    n_relations: usize,
    per_relation: usize,
    vocab_size: usize,
    overlap: f64,
    seed: u64,
) -> Result<Dataset> {
    generate(&SyntheticSpec::new(n_relations, per_relation, vocab_size, overlap, seed))
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let words: Vec<String> = (0..spec.vocab_size).map(word).collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut relations = BTreeMap::new();
    for (r, pool) in spec.pools().into_iter().enumerate() {
        let pool: Vec<usize> = pool.into_iter().collect();
        let rel = SyntheticSpec::relation_id(r);
        let examples = (0..spec.per_relation)
            .map(|_| {
                let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
                let raw_tokens: Vec<String> = (0..len)
                    .map(|_| words[*pool.choose(&mut rng).expect("pool non-empty")].clone())
                    .collect();
                let head = rng.gen_range(0..len);
                let tail = (head + rng.gen_range(1..len)) % len;
                Example {
                    tokens: raw_tokens.iter().map(|t| vocab.id(t)).collect(),
                    head: Span::new(head, head),
                    tail: Span::new(tail, tail),
                    relation: rel.clone(),
                    raw_tokens,
                }
            })
            .collect();
        relations.insert(rel, examples);
    }
    Ok(Dataset { relations, vocab })
}

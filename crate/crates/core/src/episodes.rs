//! N-way K-shot episode sampling.
//!
//! Episode `t` of a stream with master seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` switched to stream `t`, so any episode can be
//! regenerated on its own and episodes can be built in any order.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{Dataset, Example};

/// Episode shape: `way` relations, `shot` support and `queries` query
/// examples per relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol { way: 5, shot: 5, queries: 5 }
    }
}

impl Protocol {
    pub fn new(way: usize, shot: usize, queries: usize) -> Result<Self> {
        let p = Protocol { way, shot, queries };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.queries == 0 {
            return Err(Error::Config(format!(
                "protocol needs way ≥ 2, shot ≥ 1, queries ≥ 1 (got {}-way {}-shot, {} queries)",
                self.way, self.shot, self.queries
            )));
        }
        Ok(())
    }

    pub fn per_relation(&self) -> usize {
        self.shot + self.queries
    }
}

/// One example placed in an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub example: Example,
    /// Position of the example within its relation in the dataset.
    pub index: usize,
    /// Episode-local class label in `0..way`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Global relation ids in label order.
    pub relation_ids: Vec<String>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|it| it.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|it| it.label).collect()
    }

    pub fn support_examples(&self) -> Vec<&Example> {
        self.support.iter().map(|it| &it.example).collect()
    }

    pub fn query_examples(&self) -> Vec<&Example> {
        self.query.iter().map(|it| &it.example).collect()
    }
}

/// Rejects datasets that cannot supply the protocol.
pub fn check_dataset(dataset: &Dataset, protocol: &Protocol) -> Result<()> {
    protocol.validate()?;
    if dataset.n_relations() < protocol.way {
        return Err(Error::Sampling(format!(
            "{}-way episodes need {} relations but the dataset has {}",
            protocol.way,
            protocol.way,
            dataset.n_relations()
        )));
    }
    let needed = protocol.per_relation();
    for (rel, exs) in &dataset.relations {
        if exs.len() < needed {
            return Err(Error::Sampling(format!(
                "relation {rel} has {} examples, {} short of the {needed} needed ({} support + {} query)",
                exs.len(),
                needed - exs.len(),
                protocol.shot,
                protocol.queries
            )));
        }
    }
    Ok(())
}

/// Draws relations uniformly without replacement, then per relation
/// `shot + queries` examples without replacement (first `shot` to support).
pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, protocol: &Protocol, rng: &mut R) -> Result<Episode> {
    check_dataset(dataset, protocol)?;
    let rels: Vec<(&String, &Vec<Example>)> = dataset.relations.iter().collect();
    let picked = index::sample(rng, rels.len(), protocol.way);
    let mut support = Vec::with_capacity(protocol.way * protocol.shot);
    let mut query = Vec::with_capacity(protocol.way * protocol.queries);
    let mut relation_ids = Vec::with_capacity(protocol.way);
    for (label, r) in picked.into_iter().enumerate() {
        let (id, exs) = rels[r];
        relation_ids.push(id.clone());
        let chosen = index::sample(rng, exs.len(), protocol.per_relation());
        for (k, i) in chosen.into_iter().enumerate() {
            let item = EpisodeItem {
                example: exs[i].clone(),
                index: i,
                label,
            };
            if k < protocol.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        way: protocol.way,
        shot: protocol.shot,
        queries_per_class: protocol.queries,
        support,
        query,
        relation_ids,
    })
}

/// Generator for episode `index` under `master_seed`.
pub fn episode_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

pub fn episode_at(dataset: &Dataset, protocol: &Protocol, master_seed: u64, index: usize) -> Result<Episode> {
    sample_episode(dataset, protocol, &mut episode_rng(master_seed, index))
        .map_err(|e| Error::in_episode(index, e))
}

/// Episodes `0..n_episodes`, built in parallel, returned in index order.
pub fn episode_stream(
    dataset: &Dataset,
    protocol: &Protocol,
    n_episodes: usize,
    master_seed: u64,
) -> Result<Vec<Episode>> {
    check_dataset(dataset, protocol)?;
    (0..n_episodes)
        .into_par_iter()
        .map(|t| episode_at(dataset, protocol, master_seed, t))
        .collect()
}

/// Seed for a named subsystem, derived from the master seed.
pub fn derive_seed(master_seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Audit record: which examples an episode used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub relation_ids: Vec<String>,
    /// Per label, dataset positions of the support examples.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl EpisodeRecord {
    pub fn from_episode(index: usize, ep: &Episode) -> Self {
        let group = |items: &[EpisodeItem]| {
            let mut out = vec![Vec::new(); ep.way];
            for it in items {
                out[it.label].push(it.index);
            }
            out
        };
        EpisodeRecord {
            index,
            relation_ids: ep.relation_ids.clone(),
            support: group(&ep.support),
            query: group(&ep.query),
        }
    }

    /// Rebuilds the episode from the dataset it was drawn from.
    pub fn replay(&self, dataset: &Dataset) -> Result<Episode> {
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (label, rel) in self.relation_ids.iter().enumerate() {
            let exs = dataset
                .relations
                .get(rel)
                .ok_or_else(|| Error::Data(format!("episode {}: unknown relation {rel}", self.index)))?;
            let fetch = |i: usize| {
                exs.get(i).cloned().ok_or_else(|| {
                    Error::Data(format!("episode {}: relation {rel} has no example {i}", self.index))
                })
            };
            for &i in &self.support[label] {
                support.push(EpisodeItem { example: fetch(i)?, index: i, label });
            }
            for &i in &self.query[label] {
                query.push(EpisodeItem { example: fetch(i)?, index: i, label });
            }
        }
        Ok(Episode {
            way: self.relation_ids.len(),
            shot: self.support.first().map_or(0, Vec::len),
            queries_per_class: self.query.first().map_or(0, Vec::len),
            support,
            query,
            relation_ids: self.relation_ids.clone(),
        })
    }
}

/// Writes one JSON record per line.
pub fn dump_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        serde_json::to_writer(&mut out, &EpisodeRecord::from_episode(i, ep))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn load_episode_records(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests;

//! FewRel 2.0 JSON: an object mapping relation id to an array of
//! `{"tokens": [...], "h": [mention, entity_id, [[idx...], ...]], "t": [...]}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::dataset::{Dataset, Example, Span};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Deserialize, Serialize)]
struct RawEntity(String, String, Vec<Vec<usize>>);

#[derive(Debug, Deserialize, Serialize)]
struct RawInstance {
    tokens: Vec<String>,
    h: RawEntity,
    t: RawEntity,
}

pub fn load_fewrel(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fewrel(&text, vocab).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses FewRel JSON text. Without `vocab`, a vocabulary is built from this
/// split; with one, unknown tokens map to UNK.
pub fn parse_fewrel(text: &str, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed JSON: {e}")))?;
    let Value::Object(map) = root else {
        return Err(Error::Data(
            "top level must be an object of relation id -> instances".into(),
        ));
    };

    let mut raw: BTreeMap<String, Vec<(RawInstance, Span, Span)>> = BTreeMap::new();
    for (rel, instances) in map {
        let Value::Array(items) = instances else {
            return Err(Error::Data(format!("relation {rel}: expected an array")));
        };
        let mut parsed = Vec::with_capacity(items.len());
        for (i, item) in items.into_iter().enumerate() {
            let inst: RawInstance = serde_json::from_value(item)
                .map_err(|e| Error::Data(format!("relation {rel}, instance {i}: {e}")))?;
            let n = inst.tokens.len();
            let head = entity_span(&inst.h, n)
                .map_err(|m| Error::Data(format!("relation {rel}, instance {i}: head {m}")))?;
            let tail = entity_span(&inst.t, n)
                .map_err(|m| Error::Data(format!("relation {rel}, instance {i}: tail {m}")))?;
            parsed.push((inst, head, tail));
        }
        raw.insert(rel, parsed);
    }

    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(
            raw.values()
                .flatten()
                .flat_map(|(inst, _, _)| inst.tokens.iter().map(String::as_str)),
        ),
    };

    let relations = raw
        .into_iter()
        .map(|(rel, parsed)| {
            let examples = parsed
                .into_iter()
                .map(|(inst, head, tail)| Example {
                    tokens: inst.tokens.iter().map(|t| vocab.id(t)).collect(),
                    head,
                    tail,
                    relation: rel.clone(),
                    raw_tokens: inst.tokens,
                })
                .collect();
            (rel, examples)
        })
        .collect();
    Ok(Dataset { relations, vocab })
}

fn entity_span(entity: &RawEntity, n_tokens: usize) -> std::result::Result<Span, String> {
    let group = entity
        .2
        .first()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| "has an empty index group".to_string())?;
    let start = *group.iter().min().expect("non-empty");
    let end = *group.iter().max().expect("non-empty");
    if end >= n_tokens {
        return Err(format!("index {end} out of range for {n_tokens} tokens"));
    }
    Ok(Span::new(start, end))
}

/// Serializes a dataset back into FewRel JSON (used for synthetic data).
pub fn to_fewrel_json(dataset: &Dataset) -> Result<String> {
    let mut out: BTreeMap<&str, Vec<RawInstance>> = BTreeMap::new();
    for (rel, exs) in &dataset.relations {
        let items = exs
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let entity = |s: Span, tag: &str| {
                    RawEntity(
                        ex.raw_tokens[s.start..=s.end].join(" "),
                        format!("{tag}{rel}_{i}"),
                        vec![(s.start..=s.end).collect()],
                    )
                };
                RawInstance {
                    tokens: ex.raw_tokens.clone(),
                    h: entity(ex.head, "H"),
                    t: entity(ex.tail, "T"),
                }
            })
            .collect();
        out.insert(rel, items);
    }
    Ok(serde_json::to_string(&out)?)
}

pub fn save_fewrel(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_fewrel_json(dataset)?).map_err(|e| Error::io(path, e))
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab::{self, Vocabulary};
use crate::error::{Error, Result};

/// Inclusive token range `[start, end]` in the unmarked sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One labeled sentence with its head and tail entity mentions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub head: Span,
    pub tail: Span,
    pub relation: String,
    pub raw_tokens: Vec<String>,
}

/// Padded id sequence with a mask over real (non-PAD) positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedSeq {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Real ids with entity markers removed.
    pub fn unmarked_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|&(&id, &m)| m && !vocab::is_marker(id))
            .map(|(&id, _)| id)
            .collect()
    }
}

impl Example {
    /// Brackets the head with `[E1] .. [/E1]` and the tail with
    /// `[E2] .. [/E2]`, then pads with PAD to `max_len`. Sequences longer than
    /// `max_len` are cut from the right; cutting a marker is an error.
    pub fn encode(&self, max_len: usize) -> Result<EncodedSeq> {
        let n = self.tokens.len();
        for (name, s) in [("head", self.head), ("tail", self.tail)] {
            if s.start > s.end || s.end >= n {
                return Err(Error::Data(format!(
                    "{name} span {}..={} invalid for {n} tokens",
                    s.start, s.end
                )));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err(Error::Data(format!(
                "head span {:?} overlaps tail span {:?}",
                self.head, self.tail
            )));
        }
        let mut ids = Vec::with_capacity(n + 4);
        for (i, &t) in self.tokens.iter().enumerate() {
            if i == self.head.start {
                ids.push(vocab::E1_OPEN);
            }
            if i == self.tail.start {
                ids.push(vocab::E2_OPEN);
            }
            ids.push(t);
            if i == self.head.end {
                ids.push(vocab::E1_CLOSE);
            }
            if i == self.tail.end {
                ids.push(vocab::E2_CLOSE);
            }
        }
        if ids.len() > max_len {
            if ids[max_len..].iter().any(|&id| vocab::is_marker(id)) {
                return Err(Error::Data(format!(
                    "max_len {max_len} would cut an entity marker from a {}-token sequence",
                    ids.len()
                )));
            }
            ids.truncate(max_len);
        }
        let real = ids.len();
        ids.resize(max_len, vocab::PAD);
        let mask = (0..max_len).map(|i| i < real).collect();
        Ok(EncodedSeq { ids, mask })
    }
}

/// Examples grouped by relation id, plus the vocabulary they were encoded with.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub relations: BTreeMap<String, Vec<Example>>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn relation_ids(&self) -> Vec<&str> {
        self.relations.keys().map(String::as_str).collect()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_examples(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    /// Longest sequence once the four entity markers are inserted.
    pub fn max_marked_len(&self) -> usize {
        self.relations
            .values()
            .flatten()
            .map(|e| e.tokens.len() + 4)
            .max()
            .unwrap_or(0)
    }

    /// Rejects datasets where some relation has fewer than `needed` examples.
    pub fn check_per_relation(&self, needed: usize) -> Result<()> {
        for (rel, exs) in &self.relations {
            if exs.len() < needed {
                return Err(Error::Data(format!(
                    "relation {rel} has {} examples but the protocol needs {needed}",
                    exs.len()
                )));
            }
        }
        Ok(())
    }

    /// Restriction to the given relations, sharing the vocabulary.
    pub fn subset<S: AsRef<str>>(&self, relation_ids: &[S]) -> Result<Dataset> {
        let mut relations = BTreeMap::new();
        for id in relation_ids {
            let id = id.as_ref();
            let exs = self
                .relations
                .get(id)
                .ok_or_else(|| Error::Data(format!("unknown relation {id}")))?;
            relations.insert(id.to_string(), exs.clone());
        }
        Ok(Dataset {
            relations,
            vocab: self.vocab.clone(),
        })
    }

    /// Splits relations by sorted position: the first `n_first` go left.
    pub fn split_relations(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        let ids = self.relation_ids();
        if n_first == 0 || n_first >= ids.len() {
            return Err(Error::Data(format!(
                "cannot split {} relations at {n_first}",
                ids.len()
            )));
        }
        Ok((self.subset(&ids[..n_first])?, self.subset(&ids[n_first..])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{E1_CLOSE, E1_OPEN, E2_CLOSE, E2_OPEN, PAD};
    use proptest::prelude::*;

    fn example(tokens: Vec<usize>, head: (usize, usize), tail: (usize, usize)) -> Example {
        Example {
            raw_tokens: tokens.iter().map(|t| format!("t{t}")).collect(),
            tokens,
            head: Span::new(head.0, head.1),
            tail: Span::new(tail.0, tail.1),
            relation: "P1".into(),
        }
    }

    #[test]
    fn markers_bracket_entities() {
        let (a, b, c) = (10, 11, 12);
        let enc = example(vec![a, b, c], (0, 0), (2, 2)).encode(10).unwrap();
        assert_eq!(
            enc.ids,
            vec![E1_OPEN, a, E1_CLOSE, b, E2_OPEN, c, E2_CLOSE, PAD, PAD, PAD]
        );
        assert_eq!(enc.real_len(), 7);
    }

    #[test]
    fn exact_fit_has_no_padding() {
        let enc = example(vec![7, 8, 9], (0, 1), (2, 2)).encode(7).unwrap();
        assert!(enc.mask.iter().all(|&m| m));
    }

    #[test]
    fn head_after_tail() {
        let enc = example(vec![6, 7, 8, 9, 10], (3, 4), (0, 1)).encode(12).unwrap();
        assert_eq!(
            &enc.ids[..9],
            &[E2_OPEN, 6, 7, E2_CLOSE, 8, E1_OPEN, 9, 10, E1_CLOSE]
        );
    }

    #[test]
    fn overlap_and_truncation_errors() {
        assert!(example(vec![6, 7, 8], (0, 1), (1, 2)).encode(10).is_err());
        // marker would be cut
        assert!(example(vec![6, 7, 8, 9], (0, 0), (3, 3)).encode(6).is_err());
        // plain tokens may be cut
        let enc = example(vec![6, 7, 8, 9, 10], (0, 0), (1, 1)).encode(7).unwrap();
        assert_eq!(enc.ids, vec![E1_OPEN, 6, E1_CLOSE, E2_OPEN, 7, E2_CLOSE, 8]);
    }

    fn spans_strategy() -> impl Strategy<Value = (Vec<usize>, (usize, usize), (usize, usize))> {
        (2usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(6usize..50, n),
                (0..n, 0..n, 0..n, 0..n),
            )
                .prop_filter_map("disjoint spans", |(toks, (a, b, c, d))| {
                    let h = (a.min(b), a.max(b));
                    let t = (c.min(d), c.max(d));
                    (h.1 < t.0 || t.1 < h.0).then_some((toks, h, t))
                })
        })
    }

    proptest! {
        #[test]
        fn unmarked_subsequence_is_the_sentence((toks, h, t) in spans_strategy(), extra in 0usize..5) {
            let ex = example(toks.clone(), h, t);
            let enc = ex.encode(toks.len() + 4 + extra).unwrap();
            prop_assert_eq!(enc.unmarked_ids(), toks);
            // markers enclose exactly the original entity tokens
            let open = enc.ids.iter().position(|&i| i == E1_OPEN).unwrap();
            let close = enc.ids.iter().position(|&i| i == E1_CLOSE).unwrap();
            let inner: Vec<usize> = enc.ids[open + 1..close].to_vec();
            prop_assert_eq!(inner, ex.tokens[h.0..=h.1].to_vec());
            let open = enc.ids.iter().position(|&i| i == E2_OPEN).unwrap();
            let close = enc.ids.iter().position(|&i| i == E2_CLOSE).unwrap();
            let inner: Vec<usize> = enc.ids[open + 1..close].to_vec();
            prop_assert_eq!(inner, ex.tokens[t.0..=t.1].to_vec());
        }
    }
}

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const E1_OPEN: usize = 2;
pub const E1_CLOSE: usize = 3;
pub const E2_OPEN: usize = 4;
pub const E2_CLOSE: usize = 5;

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[E1]", "[/E1]", "[E2]", "[/E2]"];

pub fn is_marker(id: usize) -> bool {
    (E1_OPEN..=E2_CLOSE).contains(&id)
}

/// Dense 0-based token ids. Specials occupy ids 0..6, then ordinary tokens
/// in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from every distinct token (lowercased) in `tokens`.
    /// The result depends only on the token multiset, never on input order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.to_lowercase()).or_default() += 1;
        }
        let words = counts
            .into_iter()
            .filter(|(w, n)| *n >= 1 && !SPECIAL_TOKENS.contains(&w.as_str()))
            .map(|(w, _)| w);
        Self::from_ordered(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words).collect())
            .expect("specials are unique and words come from a set")
    }

    fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Data(
                "vocabulary file must start with the six special tokens".into(),
            ));
        }
        Self::from_ordered(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_come_first() {
        let v = Vocabulary::build(["b", "A", "a"]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("B"), 7);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["x", "y", "z"]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn ids_ignore_token_order(mut words in prop::collection::vec("[a-z]{1,4}", 1..30), seed in any::<u64>()) {
            let a = Vocabulary::build(words.iter().map(String::as_str));
            // deterministic shuffle
            let n = words.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                words.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = Vocabulary::build(words.iter().map(String::as_str));
            prop_assert_eq!(a, b);
        }
    }
}

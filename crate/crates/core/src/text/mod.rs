//! Relation-classification text: vocabulary, FewRel ingestion, entity-marker
//! encoding, and synthetic data.

mod dataset;
mod fewrel;
mod synthetic;
pub mod vocab;

pub use dataset::{Dataset, EncodedSeq, Example, Span};
pub use fewrel::{load_fewrel, parse_fewrel, save_fewrel, to_fewrel_json};
pub use synthetic::{generate, generate_synthetic, word, SyntheticSpec};
pub use vocab::Vocabulary;

/// Free-function form of [`Example::encode`].
pub fn encode_tokens(example: &Example, max_len: usize) -> crate::Result<EncodedSeq> {
    example.encode(max_len)
}

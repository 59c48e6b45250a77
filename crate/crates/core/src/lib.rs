//! Numeric-aware transformer encoder for clinical notes: a synthetic corpus,
//! a number-preserving tokenizer, label-embedding attention, value-scaled
//! number embeddings and the training/evaluation pipeline around them.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod numtok;
pub mod train;

pub use error::{Error, Result};

/// Mixes a base seed with a list of tags into an independent stream seed
/// (splitmix64 finalizer per tag).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] seeded from a
//! value derived here. Derivation hashes the master seed together with a list
//! of context labels, so adding a new consumer (another matrix cell, another
//! batch index) never perturbs the streams of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and an ordered list of labels.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for label in labels {
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derive a child seed from a master seed and numeric stream coordinates.
pub fn derive_seed_indexed(master: u64, stream: u32, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stream.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha8 stream for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

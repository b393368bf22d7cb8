//! Deterministic seed derivation.
//!
//! Every randomized stage of the pipeline draws from its own ChaCha stream,
//! keyed by the user seed plus a stable string tag. Independent stages stay
//! independent: adding draws to one never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a root seed and a stage tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// Builds the RNG for one named stage of the pipeline.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

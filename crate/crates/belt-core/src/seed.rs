//! Named seed substreams.
//!
//! Every stochastic stage (data generation, poisoning, parameter init,
//! shuffling, exclusivity sampling, defenses) derives its own RNG from the
//! global experiment seed plus a stable name, so stages can be re-run or
//! reordered without perturbing each other. ChaCha20 keeps the streams
//! identical across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

/// Derives a child seed from `(seed, name, index)`, for per-item streams.
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

/// Portable deterministic RNG for a seed.
pub fn rng_from(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

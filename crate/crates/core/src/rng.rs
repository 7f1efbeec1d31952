//! Keyed random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream selected by `(seed, key)`,
//! so results do not depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Returns the generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id derived from a string key (e.g. a record id).
pub fn key_stream(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator keyed by `(seed, key)`.
pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    stream_rng(seed, key_stream(key))
}

/// Mixes a purpose tag into a seed so unrelated consumers of one user seed
/// never share streams.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream_rng(7, 3).random();
        let b: f64 = stream_rng(7, 3).random();
        let c: f64 = stream_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "split"), derive_seed(1, "init"));
        assert_eq!(derive_seed(1, "split"), derive_seed(1, "split"));
    }
}

//! Deterministic random streams.
//!
//! Every sampler derives its generator from a run seed plus a textual stream
//! name, so that decisions for one record never depend on how many draws
//! another record consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Name recorded in run metadata for the generator family used below.
pub const RNG_NAME: &str = "chacha8/sha256-derived/v1";

pub type StreamRng = ChaCha8Rng;

/// Builds a generator for `(seed, parts...)`.
pub fn derive(seed: u64, parts: &[&str]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

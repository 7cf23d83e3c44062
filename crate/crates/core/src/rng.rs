//! Seed hierarchy.
//!
//! Every stochastic component draws from its own stream derived from a
//! master seed and a purpose label: `child = first 8 bytes (LE) of
//! SHA-256(master.to_le_bytes() || label)`. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, label))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

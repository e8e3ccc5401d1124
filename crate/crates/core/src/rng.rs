//! Labeled random streams.
//!
//! Every consumer draws from its own stream keyed by `(label, seed)`, so adding
//! draws in one module never shifts the numbers another module sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(label: &str, seed: u64) -> Rng {
    substream(label, seed, 0)
}

pub fn substream(label: &str, seed: u64, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

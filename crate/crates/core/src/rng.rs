//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed
//! plus a path of labels, so adding draws in one place never shifts the
//! numbers seen somewhere else (e.g. prompt selection vs episode sampling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream labels. Values are arbitrary but fixed; changing them changes
/// every seeded result.
pub mod label {
    pub const GENERATE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN_STEP: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const DATA_GRAPH: u64 = 5;
    pub const SELECT: u64 = 6;
}

//! Deterministic RNG substreams.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is
//! derived from the experiment seed plus a tag path such as
//! `(TRAIN, round, client)`. Results therefore do not depend on scheduling or
//! on how many workers process clients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for substream derivation.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TARGETS: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const PENALTY: u64 = 7;
    pub const CURVATURE: u64 = 8;
    pub const ATTACK: u64 = 9;
    pub const EVAL: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a base seed and a path of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn substream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

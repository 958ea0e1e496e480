//! Counter-based seed expansion.
//!
//! Every random stream in the crate is derived from a base seed and a small
//! tuple of stream identifiers, so any sub-experiment can be reproduced in
//! isolation without replaying the streams that precede it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a stream path.
pub fn derive(seed: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix(seed), |acc, &s| mix(acc ^ mix(s)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream identifiers used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const EDGE_REMOVAL: u64 = 3;
    pub const SBM_EDGES: u64 = 4;
    pub const SBM_FEATURES: u64 = 5;
    pub const SBM_SPLITS: u64 = 6;
    pub const RUN: u64 = 7;
    pub const SEEDS: u64 = 8;
}

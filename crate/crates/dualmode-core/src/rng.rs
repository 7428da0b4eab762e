//! Deterministic stream derivation: every consumer of randomness gets its own
//! ChaCha8 stream keyed by (global seed, purpose, ids), so adding workers or
//! reordering evaluation never perturbs unrelated draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const MODE: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const PRETRAIN_MASK: u64 = 5;
    pub const BENCH: u64 = 6;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from a seed and a list of stream ids.
pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ 0x6a09e667f3bcc908);
    for &id in ids {
        h = splitmix64(h ^ id.wrapping_mul(0xff51afd7ed558ccd));
    }
    ChaCha8Rng::seed_from_u64(h)
}

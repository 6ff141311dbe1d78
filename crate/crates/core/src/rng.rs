//! Named, independent random streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, tags...)`; distinct tag paths give
/// statistically independent streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mixed = tags.iter().fold(splitmix64(seed), |acc, t| splitmix64(acc ^ splitmix64(*t)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Stream purposes, kept in one place so tags never collide.
pub mod tag {
    pub const TASK: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const BACKBONE: u64 = 3;
    pub const WARMUP: u64 = 4;
    pub const PARTICIPATION: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const GLOBAL_INIT: u64 = 8;
    pub const PROFILE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

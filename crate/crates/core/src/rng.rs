//! Seed derivation. Every random stream in a run comes from one base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer over `base` and `stream`.
pub fn mix(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(base: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(mix(base, stream))
}

/// Named streams used by training runs, so that enabling one random
/// component never shifts the draws of another.
pub mod streams {
    pub const INIT_ENCODER: u64 = 1;
    pub const INIT_MASK: u64 = 2;
    pub const INIT_HEADS: u64 = 3;
    pub const BATCH: u64 = 10;
    pub const AUGMENT: u64 = 11;
    pub const NOISE: u64 = 12;
    pub const SHUFFLE: u64 = 13;
    pub const RANDOM_MASK: u64 = 14;
    pub const PROBE: u64 = 20;
    pub const PROBE_BATCH: u64 = 21;
    pub const PROBE_NOISE: u64 = 22;
    pub const INIT_REVERSE: u64 = 30;
}

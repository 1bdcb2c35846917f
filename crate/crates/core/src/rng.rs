//! Seed derivation for reproducible simulation streams.
//!
//! Every stochastic component takes its own ChaCha8 stream derived from a
//! root seed and a small tag, so adding a draw in one component never shifts
//! the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn sub_rng(seed: u64, tag: u64) -> SimRng {
    SimRng::seed_from_u64(derive(seed, tag))
}

/// Stream tags.
pub mod tag {
    pub const TRAJECTORY: u64 = 1;
    pub const STREAM: u64 = 2;
    pub const DELAY_NOISE: u64 = 3;
    pub const ACC_NOISE: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DEVICE_PICK: u64 = 7;
    pub const META_TRAIN: u64 = 8;
    pub const META_TEST: u64 = 9;
    pub const ADAPT: u64 = 10;
    pub const REPLAY: u64 = 11;
}

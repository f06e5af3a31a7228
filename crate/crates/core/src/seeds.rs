//! Seed derivation for independent random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 generator seeded by
//! `derive(base, stream, index)`, so demonstration trials, evaluation trials
//! and student drift never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags give disjoint task sets for the same base seed.
pub mod stream {
    pub const DEMO: u64 = 0x64656d6f;
    pub const EVAL: u64 = 0x6576616c;
    pub const TRAIN_EVAL: u64 = 0x74726576;
    pub const SPLIT: u64 = 0x73706c74;
    pub const INIT: u64 = 0x696e6974;
    pub const SHUFFLE: u64 = 0x73687566;
    pub const STUDENT: u64 = 0x73747564;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

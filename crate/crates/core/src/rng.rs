//! Seed derivation shared by every stochastic stage.
//!
//! A dataset is a pure function of its master seed. Each pair gets
//! `derive_seed(master, pair_index)` and each stage inside a pair gets
//! `derive_seed(pair_seed, stream)` with one of the stream tags below, so
//! pairs can be produced in any order or in parallel.
//!
//! `derive_seed(a, b) = splitmix64(a ^ splitmix64(b))` where `splitmix64` is
//! the standard 64-bit finalizer (increment `0x9E3779B97F4A7C15`, multipliers
//! `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`, shifts 30/27/31). Streams
//! are seeded into ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SceneRng = ChaCha8Rng;

pub const STREAM_SPEC: u64 = 0;
pub const STREAM_LAYOUT_A: u64 = 1;
pub const STREAM_LAYOUT_B: u64 = 2;
pub const STREAM_OCCLUSION_A: u64 = 3;
pub const STREAM_OCCLUSION_B: u64 = 4;
pub const STREAM_SEEDS_A: u64 = 5;
pub const STREAM_SEEDS_B: u64 = 6;
pub const STREAM_TARGETS_A: u64 = 7;
pub const STREAM_TARGETS_B: u64 = 8;
pub const STREAM_ASSET: u64 = 0xA55E7;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> SceneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Seedable, counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by the run seed
//! and a stream identifier built from `(tag, a, b)`, so results do not depend on
//! the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract.
pub mod tag {
    pub const TRUE_TENSOR: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const TREATMENT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const POOL: u64 = 5;
    pub const WINDOW_TREE: u64 = 6;
    pub const SLICE_COUNTS: u64 = 7;
    pub const ALS_INIT: u64 = 10;
    pub const PGD_INIT: u64 = 11;
    pub const SINGLE_CELL: u64 = 12;
    pub const REPLICATE: u64 = 13;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a stream identifier out of a tag and two indices.
pub fn stream_id(tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(tag) ^ a) ^ b.rotate_left(17))
}

/// An independent generator for `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(tag, a, b));
    rng
}

/// Derive a child seed, e.g. one per replicate of a sweep.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ stream_id(tag, index, 0))
}

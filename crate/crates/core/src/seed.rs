//! Counter-based seed derivation.
//!
//! Every random stage of a study draws from its own stream, keyed by
//! `(master_seed, cell, replication, stage)`. Streams never depend on
//! scheduling order, so results are identical for any degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags used when deriving per-stage seeds.
pub mod stage {
    pub const SIMULATE: u64 = 0x5349_4d55;
    pub const MISSINGNESS: u64 = 0x4d41_534b;
    pub const MICE: u64 = 0x4d49_4345;
    pub const CALIBRATE: u64 = 0x4341_4c49;
    pub const PMM: u64 = 0x504d_4d00;
    pub const MULTISTART: u64 = 0x4d53_5452;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with an ordered list of counters.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |h, &p| splitmix64(h ^ splitmix64(p ^ GOLDEN)))
}

/// Deterministic generator for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

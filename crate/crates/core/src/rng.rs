//! Seeding conventions.
//!
//! Every random stream in the crate is a PCG-XSL-RR 128/64 generator
//! (`Pcg64`), seeded from a 64-bit value. Independent streams for items,
//! chains and epochs are obtained with [`sub_seed`], so a parallel run and a
//! serial run consume identical streams.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type Rng = Pcg64;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `index` from a parent seed.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ mix64(index.wrapping_add(1)))
}

/// Builds a generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

/// Generator for sub-stream `index` of `seed`.
pub fn sub_rng(seed: u64, index: u64) -> Rng {
    rng_from_seed(sub_seed(seed, index))
}

/// Salts used to keep the streams of different subsystems apart.
pub mod salt {
    pub const CORPUS: u64 = 0x636f_7270;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const CHAINS: u64 = 0x6368_6169;
}

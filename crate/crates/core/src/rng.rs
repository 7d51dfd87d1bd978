//! Seeded, platform-independent random streams.
//!
//! Every stochastic decision in the pipeline draws from a substream keyed by
//! `(seed, domain, indices...)`, so results do not depend on evaluation order
//! or thread count.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// The generator used everywhere in the crate.
pub type Rng = Xoshiro256PlusPlus;

/// Substream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const VOCAB: u64 = 6;
    pub const HEAD_INIT: u64 = 7;
    pub const FINETUNE: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator for `(seed, path...)`.
pub fn substream(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ 0x6D6C_6D6B_6974_0001);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    Rng::seed_from_u64(h)
}

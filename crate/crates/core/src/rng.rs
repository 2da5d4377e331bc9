//! Seed derivation. Every random stream in a run is a ChaCha8 generator whose
//! seed is mixed from the run seed and a fixed path of integers, so streams
//! never depend on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, so that different consumers of one run seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const TIED_GEN: u64 = 5;
    pub const TIED_MEM: u64 = 6;
    pub const SPARSE: u64 = 7;
    pub const SMOOTHING: u64 = 8;
    pub const REFERENCE: u64 = 9;
    pub const PROBES: u64 = 10;
    pub const SYNTH: u64 = 11;
    pub const SPLIT: u64 = 12;
    pub const GRID: u64 = 13;
}

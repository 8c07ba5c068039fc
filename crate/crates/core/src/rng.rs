//! Seed derivation and Gaussian draws.
//!
//! Every random stream in a run is keyed by a path of integers hashed into a
//! fresh ChaCha seed, so results never depend on evaluation order or threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, p| splitmix(acc ^ splitmix(*p)))
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

pub fn normal_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Stream tags used with [`derive_seed`].
pub mod stream {
    pub const SAMPLE: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const SMOOTH: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const INIT: u64 = 6;
    pub const BASELINE: u64 = 7;
    pub const PRIOR: u64 = 8;
    pub const ORACLE: u64 = 9;
}

//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a master seed and a small tuple of stream labels, so results do
//! not depend on call order between unrelated consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels, so that e.g. the sampling and weighting streams of the
/// same solver step never coincide.
pub mod stream {
    pub const SAMPLE: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const GRADIENT: u64 = 3;
    pub const TASK: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const META: u64 = 6;
    pub const CHUNK: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a master seed with labels into a new 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng_from(seed: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, labels))
}

//! Seed derivation. Every random draw in the crate comes from a `ChaCha8Rng`
//! built here, so a master seed fixes all downstream randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a master seed.
pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent seed for item `index` of a stream keyed by `(seed, stream)`.
///
/// Uses the splitmix64 finaliser so neighbouring indices give unrelated seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for item `index` of stream `stream`.
pub fn item_rng(seed: u64, stream: u64, index: u64) -> Rng {
    rng(derive_seed(seed, stream, index))
}

/// Stream identifiers, one per consumer, so the same master seed never feeds
/// two unrelated draws.
pub mod stream {
    pub const EYE_PARAMS: u64 = 1;
    pub const DOMAIN_SHIFT: u64 = 2;
    pub const SEGMENTER: u64 = 3;
    pub const PERCEPT: u64 = 4;
    pub const REFINER: u64 = 5;
    pub const ESTIMATOR: u64 = 6;
    pub const DATASET: u64 = 7;
    pub const REFINER_INIT: u64 = 8;
}

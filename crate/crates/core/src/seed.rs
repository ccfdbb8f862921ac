//! Seed derivation.
//!
//! Every stream of randomness in the crate is derived from one master seed
//! with [`derive_seed`]: `splitmix64(splitmix64(master) ^ splitmix64(index + 0x9E37_79B9_7F4A_7C15))`.
//! The rule is fixed so that datasets, rollouts and per-run problems can be
//! generated in any order (or in parallel) and still reproduce exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

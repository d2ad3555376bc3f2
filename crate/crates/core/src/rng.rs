//! Counter-based random streams.
//!
//! Every random draw in the toolkit comes from a generator seeded by hashing a
//! master seed together with a small key (iteration, phase, sample index, ...).
//! Two draws with the same key are identical no matter in which order or on
//! which thread they are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `key` into `seed`. Distinct keys give (practically) independent seeds.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    for (i, k) in key.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(k.wrapping_add((i as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D))));
    }
    h
}

/// A generator for the stream identified by `(seed, key)`.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

//! Deterministic sub-seed derivation so that parallel fan-out (CV folds,
//! subsamples, Monte-Carlo replicates) stays independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct for distinct `index` at fixed `seed` (splitmix64 is a bijection).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index.wrapping_add(1))
}

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn sub_rng(seed: u64, index: u64) -> ChaCha12Rng {
    rng(sub_seed(seed, index))
}

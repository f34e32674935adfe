//! Seed derivation. Every random stream in training is keyed by a tuple
//! (global seed, purpose, epoch, step, user, ...) so that skipping one
//! consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Stream purposes.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SYNTH_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT_MAIN: u64 = 4;
    pub const DROPOUT_CANDIDATE: u64 = 5;
    pub const DROPOUT_VIEW: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const UNIFORM_POSITIVE: u64 = 8;
    pub const HASH_EMBED: u64 = 9;
}

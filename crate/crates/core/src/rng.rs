//! Seed derivation helpers.
//!
//! Every random stream in the crate is keyed by a tuple of integers (run seed,
//! subject, emotion, epoch, sample index, ...) rather than drawn from a shared
//! global generator, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0FAF_FEC7_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// A ChaCha8 stream keyed by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Uniform value in [0, 1) derived statelessly from a key tuple.
#[inline]
pub fn unit_hash(parts: &[u64]) -> f64 {
    (derive_seed(parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

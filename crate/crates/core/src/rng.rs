//! Deterministic RNG derivation.
//!
//! Every stochastic operation in the crate takes an explicit generator. To
//! make long runs resumable, per-step generators are derived from a master
//! seed and a label rather than from a single mutable stream: re-deriving
//! `(seed, "stage2", step)` after a restart yields the exact same draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes, mixed with the seed.
fn mix(seed: u64, label: &str, counter: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^ seed.rotate_left(17)
}

/// Derive an independent generator for `(seed, label, counter)`.
pub fn derive(seed: u64, label: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label, counter))
}

/// Shorthand for label-only derivation.
pub fn derive_named(seed: u64, label: &str) -> ChaCha8Rng {
    derive(seed, label, 0)
}

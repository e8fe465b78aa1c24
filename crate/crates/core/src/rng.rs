//! Seeded randomness shared by every deterministic operation.
//!
//! All streams are ChaCha8 keyed by a 64-bit seed mixed with a stable FNV-1a
//! hash of a label, so independent consumers (tensor init, shuffles, sampling)
//! never share a stream and results do not depend on call order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()))
}

/// Uniform index in `0..bound` by 128-bit multiply-shift.
pub fn below<R: RngCore>(rng: &mut R, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Fisher-Yates from the back: for i = n-1 down to 1, swap i with `below(i+1)`.
pub fn shuffle<T, R: RngCore>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

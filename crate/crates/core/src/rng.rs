//! The single pseudo-random source used across the crate.
//!
//! All stochastic steps (phantom synthesis, weight initialization, crop
//! sampling) draw from xoshiro256** seeded through SplitMix64, as published
//! by Blackman and Vigna. Its output for a given 64-bit seed is fixed by the
//! algorithm's constants, so runs are reproducible bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::Xoshiro256StarStar;

pub type DetRng = Xoshiro256StarStar;

/// Seeds a generator from a 64-bit value (SplitMix64 state expansion).
pub fn seeded(seed: u64) -> DetRng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Derives an independent stream for a labelled sub-task.
pub fn derive(seed: u64, stream: u64) -> DetRng {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn normal(rng: &mut DetRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo..hi)
}

pub fn index(rng: &mut DetRng, n: usize) -> usize {
    rng.gen_range(0..n)
}

pub fn coin(rng: &mut DetRng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

//! Seeded random streams.
//!
//! Every random decision in the crate (weight init, masks, synthetic images,
//! shuffling) draws from [`Rng`], which is xoshiro256++ whose 256-bit state is
//! expanded from a 64-bit seed with SplitMix64 (the reference seeding
//! procedure). The derived quantities are mapped as follows so another
//! implementation can reproduce the exact streams:
//!
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)`: Lemire's widening multiply with rejection on the low word.
//! * `gaussian()`: Box-Muller, cosine branch only, `u1 = 1 - uniform()`,
//!   `u2 = uniform()`; two `next_u64` draws per sample.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! Sub-streams come from [`derive_seed`], which mixes a parent seed, an ASCII
//! tag and an index with SplitMix64.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        lo + self.below((hi - lo) as u64 + 1) as usize
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Child seed for `(seed, tag, index)`:
/// `a = SplitMix64(seed ^ fnv1a(tag)).next()`, result `SplitMix64(a ^ index).next()`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let a = SplitMix64::seed_from_u64(seed ^ fnv1a(tag.as_bytes())).next_u64();
    SplitMix64::seed_from_u64(a ^ index).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(3);
        for n in 1..50u64 {
            for _ in 0..100 {
                assert!(r.below(n) < n);
            }
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        let s = 9;
        assert_ne!(derive_seed(s, "random", 0), derive_seed(s, "block", 0));
        assert_ne!(derive_seed(s, "random", 0), derive_seed(s, "random", 1));
        assert_eq!(derive_seed(s, "span", 5), derive_seed(s, "span", 5));
    }

    #[test]
    fn gaussian_moments_are_plausible() {
        let mut r = Rng::new(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}

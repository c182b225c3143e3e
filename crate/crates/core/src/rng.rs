//! Seeded randomness.
//!
//! All streams are xoshiro256++ generators whose state is expanded from a 64-bit seed by
//! SplitMix64. Shuffles use an explicit Fisher–Yates loop with multiply-shift index
//! reduction, so permutations depend only on the seed and these two published generators.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

use crate::Matrix;

pub type Stream = Xoshiro256PlusPlus;

pub fn stream(seed: u64) -> Stream {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent seed for a named sub-stream (layer index, epoch, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(seed);
    let base = sm.next_u64();
    let mut sm = SplitMix64::seed_from_u64(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    sm.next_u64()
}

/// Uniform index in `0..n` by multiply-shift reduction of one 64-bit draw.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// In-place Fisher–Yates shuffle, iterating from the back.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Matrix of independent standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed);
    gaussian_matrix_from(rows, cols, &mut rng)
}

pub fn gaussian_matrix_from(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let mut a: Vec<usize> = (0..100).collect();
        let mut b = a.clone();
        shuffle(&mut a, &mut stream(7));
        shuffle(&mut b, &mut stream(7));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(a, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}

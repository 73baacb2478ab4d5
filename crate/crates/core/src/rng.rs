//! Seeded random streams.
//!
//! Every stream is a xoshiro256** generator whose state is filled from a
//! splitmix64 sequence started at the seed. Reals are drawn from the top 53
//! bits of each output, and bounded integers are `floor(u * n)`, so the exact
//! sequence is reproducible in any language.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};

/// Sub-seed slots derived from a master seed.
pub mod stream {
    pub const DATA_TRAIN: u64 = 0;
    pub const DATA_VAL: u64 = 1;
    pub const DATA_ATTACK: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const DATA_TRAIN_DOWNSTREAM: u64 = 4;
    pub const TRAIN_SGG: u64 = 5;
    pub const TRAIN_DOWNSTREAM: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const EVAL: u64 = 8;
}

/// The `index`-th output (0-based) of splitmix64 started at `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(master);
    let mut out = 0;
    for _ in 0..=index {
        out = sm.next_u64();
    }
    out
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform real in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

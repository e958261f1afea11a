//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], a thin wrapper
//! over ChaCha8 (`rand_chacha::ChaCha8Rng`). ChaCha8 output is specified
//! independently of platform and word size, so a seed reproduces the same
//! draw sequence everywhere. The generator is splittable: [`SeededRng::split`]
//! derives an independent child by selecting one of ChaCha's 2^64 streams
//! under the same key, so sub-tasks (weight init, shuffling, data jitter)
//! never share a sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator on stream `stream` of this seed's key.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const DATA: u64 = 4;
}

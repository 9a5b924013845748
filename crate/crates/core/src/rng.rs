//! Seeded, streamed random number generation.
//!
//! The generator is ChaCha with 8 rounds keyed from the 64-bit seed and
//! positioned on the 64-bit stream id. Identical `(seed, stream)` pairs
//! produce bit-identical sequences across runs and platforms; distinct
//! stream ids produce independent sequences. The derived distributions
//! below (uniform, normal, integer range, shuffling) are part of the
//! format-stability contract and must never change.

use crate::real::Real;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic random source identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform scalar in `[0, 1)`.
    pub fn uniform<F: Real>(&mut self) -> F {
        F::of(self.next_f64())
    }

    /// Uniform scalar in `[lo, hi)`.
    pub fn uniform_in<F: Real>(&mut self, lo: F, hi: F) -> F {
        lo + (hi - lo) * self.uniform::<F>()
    }

    /// Standard normal via Box-Muller (two uniform draws per sample).
    pub fn normal<F: Real>(&mut self) -> F {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64); // (0, 1]
        let u2 = self.next_f64();
        F::of((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
    }

    /// Uniform integer in `[0, n)` by rejection (unbiased).
    pub fn range(&mut self, n: usize) -> usize {
        assert!(n > 0, "range over empty interval");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n`, in sampled order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} items from {n}");
        // Partial Fisher-Yates over an index vector.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.range(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

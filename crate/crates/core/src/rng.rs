//! Counter-based random streams.
//!
//! Sample `i` of a stream keyed by `k` is `mix(k + (i + 1) * GOLDEN)`, where
//! `mix` is the SplitMix64 finalizer. Outputs depend only on `(key, i)`,
//! so streams are reproducible across runs and platforms and can be split
//! into independent children by hashing a label into a new key.

use crate::tensor::{Scalar, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Identifier of the generator recorded alongside a seed.
pub const ALGORITHM: &str = "splitmix64-counter";

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Independent child stream, determined by this stream's seed and `label`.
    pub fn split(&self, label: u64) -> RngState {
        RngState::new(mix(self.seed ^ mix(label.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        // rejection sampling removes modulo bias
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.next_u64();
            if v < zone {
                return lo + (v % span) as usize;
            }
        }
    }

    /// Standard normal via the Box-Muller cosine branch.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.normal())).collect();
        Tensor::from_vec(shape, data).expect("shape and data agree")
    }
}

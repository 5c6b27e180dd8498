//! Reproducible random numbers.
//!
//! The generator is ChaCha8 (a counter-based stream cipher) keyed from the
//! 64-bit seed via `SeedableRng::seed_from_u64`. Independent sub-streams for
//! per-sample work use ChaCha's 64-bit stream id, so sample `i` of a run
//! never depends on how many draws sample `i - 1` consumed.
//!
//! Uniforms take the top 53 bits of a `u64` draw. Standard normals use the
//! Box-Muller transform in `f64` on `u1 = 1 - U` (so `u1` lies in `(0, 1]`)
//! and `u2 = U'`; both outputs of each pair are used, cosine branch first.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Generator for sub-stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` by rejection, `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.standard_normal() as f32;
        }
    }

    /// `count` standard-normal draws as a rank-1 tensor.
    pub fn sample_standard_normal(&mut self, count: usize) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::Input("sample count must be positive".into()));
        }
        let mut data = vec![0.0; count];
        self.fill_standard_normal(&mut data);
        Tensor::new(vec![count], data)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(7).sample_standard_normal(64).unwrap();
        let b = Rng::new(7).sample_standard_normal(64).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn different_seeds_differ() {
        let a = Rng::new(7).sample_standard_normal(64).unwrap();
        let b = Rng::new(8).sample_standard_normal(64).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        let a = Rng::with_stream(1, 0).sample_standard_normal(16).unwrap();
        let b = Rng::with_stream(1, 1).sample_standard_normal(16).unwrap();
        assert_ne!(a.data(), b.data());
        let a2 = Rng::with_stream(1, 0).sample_standard_normal(16).unwrap();
        assert_eq!(a.data(), a2.data());
    }

    #[test]
    fn normal_moments() {
        let t = Rng::new(2024).sample_standard_normal(100_000).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(Rng::new(0).sample_standard_normal(0).is_err());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(3);
        for n in 1..50u64 {
            assert!(r.below(n) < n);
        }
    }
}

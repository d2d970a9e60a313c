//! Deterministic random streams.
//!
//! The user seed is expanded by splitmix64 into the state of a xoshiro256**
//! generator. Uniforms use the top 53 bits of each output, so every value is
//! a multiple of 2^-53 in `[0, 1)`. Gaussians come from the cosine branch of
//! Box–Muller and always consume exactly two uniforms.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
    draws: u64,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            draws: 0,
        }
    }

    /// Number of 64-bit outputs consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        box_muller(u1, u2)
    }

    /// Uniform integer in `0..k`.
    pub fn below(&mut self, k: usize) -> usize {
        debug_assert!(k > 0);
        ((self.uniform() * k as f64) as usize).min(k - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_tensor(&mut self, n: usize) -> Tensor {
        Tensor::from_vec((0..n).map(|_| self.uniform()).collect())
    }

    pub fn gaussian_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.gaussian()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    /// Independent child stream seeded from this stream's next output.
    pub fn split(&mut self) -> Rng {
        Rng::seed_from(self.next_u64())
    }
}

/// `sqrt(-2 ln u1) * cos(2π u2)` for `u1` in `(0, 1]`.
pub fn box_muller(u1: f64, u2: f64) -> f64 {
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let mut a = Rng::seed_from(42);
        let mut b = Rng::seed_from(42);
        for _ in 0..1000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        assert_eq!(a.draws(), 1000);
    }

    #[test]
    fn empty_draw_leaves_state() {
        let mut r = Rng::seed_from(1);
        let t = r.uniform_tensor(0);
        assert_eq!(t.len(), 0);
        assert_eq!(r.draws(), 0);
    }

    #[test]
    fn box_muller_fixed_points() {
        assert_eq!(box_muller(1.0, 0.3), 0.0);
        assert!((box_muller((-2.0f64).exp(), 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_moments() {
        let mut r = Rng::seed_from(3);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn gaussian_moments_and_draw_count() {
        let mut r = Rng::seed_from(4);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| r.gaussian()).collect();
        assert_eq!(r.draws(), 2 * n as u64);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn one_minus_uniform_is_exact() {
        let mut r = Rng::seed_from(9);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert_eq!(1.0 - (1.0 - u), u);
        }
    }
}

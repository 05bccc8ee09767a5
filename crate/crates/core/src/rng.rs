//! Seeded random streams.
//!
//! Every draw in the crate goes through [`Rng`], a ChaCha8 stream keyed by a
//! 64-bit seed. Normal variates use the Box–Muller transform. Independent
//! consumers never share a stream; they derive children with
//! [`Rng::derive`], which hashes `(seed, stream_id)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

/// SplitMix64 finaliser.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the child stream `stream` of `seed`.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream keyed by `hash(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(child_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n > 0`), rejection-sampled.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// i.i.d. `N(mean, std^2)` samples in a tensor of the given shape.
    pub fn gaussian(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor, TensorError> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(TensorError::Invalid(format!(
                "gaussian: std must be finite and non-negative (mean={mean}, std={std})"
            )));
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| mean + std * self.normal()).collect();
        Tensor::new(shape, data)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Free-function form of [`Rng::gaussian`].
pub fn sample_gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor, TensorError> {
    rng.gaussian(shape, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_degenerate() {
        let mut rng = Rng::new(1);
        let t = rng.gaussian(&[3], 0.0, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_std_is_rejected() {
        let mut rng = Rng::new(1);
        assert!(rng.gaussian(&[3], 0.0, -1.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(7).gaussian(&[64], 0.0, 1.0).unwrap();
        let b = Rng::new(7).gaussian(&[64], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c = Rng::new(8).gaussian(&[64], 0.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn large_sample_moments() {
        let mut rng = Rng::new(2024);
        let t = rng.gaussian(&[100_000], 0.0, 1.0).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(5, 0);
        let mut b = Rng::derive(5, 1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = Rng::derive(5, 0);
        let mut d = Rng::derive(5, 0);
        assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = Rng::new(3);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}

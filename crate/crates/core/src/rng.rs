//! Seeded randomness.
//!
//! Every random draw in the crate comes from a SplitMix64 stream
//! (state += 0x9E3779B97F4A7C15, then two xor-shift-multiply rounds),
//! so a seed fully determines parameters, datasets and noise.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SeededRng(SplitMix64);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Independent stream derived from `seed` and a label, e.g. one per parameter.
    pub fn derived(seed: u64, label: &str) -> Self {
        // FNV-1a over the label, mixed with the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(seed ^ h.rotate_left(17))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Normal draw rejected and redrawn outside `[-2 sigma, 2 sigma]`.
    pub fn truncated_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], sigma: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal() * sigma).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * self.uniform()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

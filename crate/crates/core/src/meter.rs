//! FLOPs accounting shared by the kernels and the static analyzer.
//!
//! Multiply-adds count as two FLOPs and go in the headline `flops` column.
//! Everything elementwise (bias and residual adds, scaling, softmax, norms,
//! GELU, pooling) goes in the `nonlinear` column at the fixed per-element
//! costs below, so the headline figure does not depend on how those are
//! tallied.

use std::ops::{Add, AddAssign};

/// Per-element cost of adding a bias or a residual branch.
pub const ADD_COST: u64 = 1;
/// Per-element cost of multiplying by a constant.
pub const SCALE_COST: u64 = 1;
/// Per-element cost of a row softmax: max, subtract, exp, accumulate, divide.
pub const SOFTMAX_COST: u64 = 5;
/// Per-element cost of standardization: mean, subtract, square, accumulate, normalize.
pub const NORM_COST: u64 = 5;
/// Extra per-element cost of the norm affine (gamma multiply, beta add).
pub const NORM_AFFINE_COST: u64 = 2;
/// Per-element cost of the tanh GELU approximation.
pub const GELU_COST: u64 = 8;
/// Per-element cost of LayerScale injection: one multiply, one add.
pub const INJECT_COST: u64 = 2;
/// Per-element cost of mean pooling (one accumulate).
pub const POOL_COST: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Flops {
    pub flops: u64,
    pub nonlinear: u64,
}

impl Flops {
    pub const ZERO: Flops = Flops { flops: 0, nonlinear: 0 };

    /// Dense product `[m,k] x [k,n]`.
    pub fn matmul(m: usize, k: usize, n: usize) -> Flops {
        Flops { flops: 2 * (m * k * n) as u64, nonlinear: 0 }
    }

    /// `rows` row vectors through an `input -> output` linear map.
    pub fn linear(rows: usize, input: usize, output: usize, bias: bool) -> Flops {
        let mut f = Flops::matmul(rows, input, output);
        if bias {
            f.nonlinear += ADD_COST * (rows * output) as u64;
        }
        f
    }

    pub fn elementwise(elements: usize, cost: u64) -> Flops {
        Flops { flops: 0, nonlinear: cost * elements as u64 }
    }

    pub fn norm(elements: usize, affine: bool) -> Flops {
        let per = NORM_COST + if affine { NORM_AFFINE_COST } else { 0 };
        Flops::elementwise(elements, per)
    }

    /// Depthwise `r x r` stride-`r` convolution producing `channels x out x out`.
    pub fn dwconv(channels: usize, out_side: usize, rate: usize) -> Flops {
        Flops { flops: 2 * (channels * out_side * out_side * rate * rate) as u64, nonlinear: 0 }
    }

    /// Pointwise channel mix over `pixels` positions, always with bias.
    pub fn conv1x1(c_in: usize, c_out: usize, pixels: usize) -> Flops {
        Flops::linear(pixels, c_in, c_out, true)
    }

    pub fn total(&self) -> u64 {
        self.flops + self.nonlinear
    }
}

impl Add for Flops {
    type Output = Flops;
    fn add(self, rhs: Flops) -> Flops {
        Flops { flops: self.flops + rhs.flops, nonlinear: self.nonlinear + rhs.nonlinear }
    }
}

impl AddAssign for Flops {
    fn add_assign(&mut self, rhs: Flops) {
        self.flops += rhs.flops;
        self.nonlinear += rhs.nonlinear;
    }
}

impl std::iter::Sum for Flops {
    fn sum<I: Iterator<Item = Flops>>(iter: I) -> Flops {
        iter.fold(Flops::ZERO, |a, b| a + b)
    }
}

/// Explicit FLOPs accumulator. Owned by whoever runs the computation.
#[derive(Clone, Debug, Default)]
pub struct FlopMeter {
    total: Flops,
}

impl FlopMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, f: Flops) {
        self.total += f;
    }

    pub fn total(&self) -> Flops {
        self.total
    }

    pub fn reset(&mut self) {
        self.total = Flops::ZERO;
    }
}

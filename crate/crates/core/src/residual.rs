//! Attention residual between stages.
//!
//! The last scores of stage `m-1` (`[H_prev, N_prev, N_prev]`) pass through a
//! depthwise `r x r` stride-`r` convolution, a per-head standardization and
//! a 1x1 convolution across heads, giving `[H_cur, N_cur, N_cur]` with
//! `r = N_prev / N_cur`. The result is added to the first VA scores of
//! stage `m` scaled by a per-head LayerScale.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttnResidualParams {
    /// `[H_prev, r, r]`
    pub dw_kernels: usize,
    /// `[H_cur, H_prev]`
    pub mix_w: usize,
    /// `[H_cur]`
    pub mix_b: usize,
    pub norm_g: Option<usize>,
    pub norm_b: Option<usize>,
    /// `[H_cur]`
    pub layerscale: usize,
    pub rate: usize,
}

pub fn downsample_attention(tape: &mut Tape<'_>, vars: &[Var], p: &AttnResidualParams, a_last: Var) -> Result<Var> {
    let s = tape.shape(a_last).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::invalid("downsample_attention", format!("expected [H, N, N], got {s:?}")));
    }
    if s[1] % p.rate != 0 {
        return Err(Error::invalid(
            "downsample_attention",
            format!("side {} is not divisible by rate {}", s[1], p.rate),
        ));
    }
    let k_shape = tape.shape(vars[p.dw_kernels]);
    if k_shape[0] != s[0] || tape.shape(vars[p.mix_w])[1] != s[0] {
        return Err(Error::invalid(
            "downsample_attention",
            format!("{} incoming heads do not match kernels {k_shape:?}", s[0]),
        ));
    }
    let heads = s[0];
    let side = s[1] / p.rate;
    let d = tape.dwconv_square(a_last, vars[p.dw_kernels], p.rate)?;
    let flat = tape.reshape(d, &[heads, side * side])?;
    let normed = tape.layer_norm(flat, p.norm_g.map(|i| vars[i]), p.norm_b.map(|i| vars[i]), ops::LAYER_NORM_EPS)?;
    let maps = tape.reshape(normed, &[heads, side, side])?;
    tape.conv1x1(maps, vars[p.mix_w], vars[p.mix_b])
}

/// `a_va[h] + layerscale[h] * a_init[h]`.
pub fn inject_residual(a_va: &Tensor, a_init: &Tensor, layerscale: &Tensor) -> Result<Tensor> {
    crate::tape::inject_forward(a_va, a_init, layerscale)
}

/// Tensor-level [`downsample_attention`] with explicit parameters.
pub fn downsample_attention_tensor(
    a_last: &Tensor,
    dw_kernels: &Tensor,
    rate: usize,
    norm: Option<(&Tensor, &Tensor)>,
    standardize: bool,
    mix_w: &Tensor,
    mix_b: &Tensor,
) -> Result<Tensor> {
    let d = ops::dwconv_square(a_last, dw_kernels, rate)?;
    let normed = if standardize {
        let (h, side) = (d.shape()[0], d.shape()[1]);
        let flat = d.reshape(&[h, side * side])?;
        ops::layer_norm(&flat, norm.map(|n| n.0), norm.map(|n| n.1), ops::LAYER_NORM_EPS)?.reshape(&[h, side, side])?
    } else {
        d
    };
    ops::conv1x1_channels(&normed, mix_w, mix_b)
}

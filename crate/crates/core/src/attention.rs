//! Vanilla-attention (VA) and less-attention (LA) layers.
//!
//! Scores threaded between layers are always pre-softmax, `[H, N, N]`.
//! A VA layer computes them from queries and keys; an LA layer derives
//! them from the previous layer's scores as `psi(theta(A)^T)^T`, applying
//! both square maps row-wise, and needs only the value projection.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Index, Tape, Var};
use crate::tensor::Tensor;

/// Parameter handles for the feed-forward sublayer (pre-norm, GELU).
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub ln_g: usize,
    pub ln_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug)]
pub struct VaLayerParams {
    pub heads: usize,
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub bq: usize,
    /// Keys carry no bias: it would only shift each score row by a constant.
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct LaLayerParams {
    pub heads: usize,
    pub ln_g: usize,
    pub ln_b: usize,
    pub theta_w: usize,
    pub theta_b: Option<usize>,
    pub psi_w: usize,
    pub psi_b: Option<usize>,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub enum LayerParams {
    Va(VaLayerParams),
    La(LaLayerParams),
}

impl LayerParams {
    pub fn heads(&self) -> usize {
        match self {
            LayerParams::Va(p) => p.heads,
            LayerParams::La(p) => p.heads,
        }
    }
}

/// Residual from the previous stage, injected into a first VA layer.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    /// `[H, N, N]` downsampled scores.
    pub init: Var,
    /// `[H]` LayerScale.
    pub scale: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub z: Var,
    /// Pre-softmax scores this layer produced.
    pub scores: Var,
    /// Row-stochastic attention weights.
    pub probs: Var,
}

fn heads_index(n: usize, dim: usize, heads: usize) -> Result<Index> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid("attention", format!("width {dim} not divisible by {heads} heads")));
    }
    Ok(Arc::from(ops::split_heads_index(n, dim, heads)))
}

fn split(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Var> {
    let (n, dim) = (tape.shape(x)[0], tape.shape(x)[1]);
    let idx = heads_index(n, dim, heads)?;
    tape.gather(x, idx, vec![heads, n, dim / heads])
}

fn merge(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (h, n, d) = (s[0], s[1], s[2]);
    tape.gather(x, Arc::from(ops::merge_heads_index(n, h * d, h)), vec![n, h * d])
}

/// `Q_h K_h^T / sqrt(d)` per head with `Q = z Wq + bq`, `K = z Wk`.
pub fn va_scores(tape: &mut Tape<'_>, z: Var, wq: Var, bq: Option<Var>, wk: Var, heads: usize) -> Result<Var> {
    let dim = tape.shape(z)[1];
    if dim % heads != 0 {
        return Err(Error::invalid("va_scores", format!("width {dim} not divisible by {heads} heads")));
    }
    let q = tape.linear(z, wq, bq)?;
    let k = tape.linear(z, wk, None)?;
    let qh = split(tape, q, heads)?;
    let kh = split(tape, k, heads)?;
    let kt = tape.transpose_last2(kh)?;
    let s = tape.bmm(qh, kt)?;
    Ok(tape.scale(s, 1.0 / ((dim / heads) as f64).sqrt()))
}

/// `psi(theta(A)^T)^T` per head, both maps applied row-wise.
pub fn la_transform(
    tape: &mut Tape<'_>,
    a: Var,
    theta_w: Var,
    theta_b: Option<Var>,
    psi_w: Var,
    psi_b: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(a);
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::invalid("la_transform", format!("scores must be [H, N, N], got {s:?}")));
    }
    let n = s[1];
    for w in [theta_w, psi_w] {
        if tape.shape(w) != [n, n] {
            return Err(Error::shape("la_transform", tape.shape(a), tape.shape(w)));
        }
    }
    let t = tape.linear(a, theta_w, theta_b)?;
    let t = tape.transpose_last2(t)?;
    let t = tape.linear(t, psi_w, psi_b)?;
    tape.transpose_last2(t)
}

/// Softmax over the scores, weighted sum of value heads, concatenation and output projection.
/// Returns `(output [N, D], probs [H, N, N])`.
pub fn attention_apply(
    tape: &mut Tape<'_>,
    scores: Var,
    z: Var,
    wv: Var,
    bv: Option<Var>,
    wo: Var,
    bo: Option<Var>,
) -> Result<(Var, Var)> {
    let heads = tape.shape(scores)[0];
    let n = tape.shape(z)[0];
    if tape.shape(scores)[1..] != [n, n] {
        return Err(Error::shape("attention_apply", tape.shape(scores), tape.shape(z)));
    }
    let probs = tape.softmax_rows(scores);
    let v = tape.linear(z, wv, bv)?;
    let vh = split(tape, v, heads)?;
    let ctx = tape.bmm(probs, vh)?;
    let ctx = merge(tape, ctx)?;
    let out = tape.linear(ctx, wo, bo)?;
    Ok((out, probs))
}

fn ffn(tape: &mut Tape<'_>, vars: &[Var], p: &FfnParams, z: Var) -> Result<Var> {
    let h = tape.layer_norm(z, Some(vars[p.ln_g]), Some(vars[p.ln_b]), ops::LAYER_NORM_EPS)?;
    let h = tape.linear(h, vars[p.fc1_w], Some(vars[p.fc1_b]))?;
    let h = tape.gelu(h);
    let h = tape.linear(h, vars[p.fc2_w], Some(vars[p.fc2_b]))?;
    tape.add(z, h)
}

/// One pre-norm transformer block: `z' = z + Attn(LN(z))`, `out = z' + FFN(LN(z'))`.
///
/// `vars` maps parameter ids to tape leaves. `position` is the layer's
/// 0-based index within its stage.
pub fn block_forward(
    tape: &mut Tape<'_>,
    vars: &[Var],
    layer: &LayerParams,
    z: Var,
    incoming: Option<Var>,
    residual: Option<Injection>,
    position: usize,
) -> Result<BlockOutput> {
    if residual.is_some() && (position != 0 || matches!(layer, LayerParams::La(_))) {
        return Err(Error::invalid(
            "block_forward",
            format!("attention residual is only accepted by the first VA layer of a stage (layer {position})"),
        ));
    }
    match layer {
        LayerParams::Va(p) => {
            let h = tape.layer_norm(z, Some(vars[p.ln_g]), Some(vars[p.ln_b]), ops::LAYER_NORM_EPS)?;
            let mut scores = va_scores(tape, h, vars[p.wq], Some(vars[p.bq]), vars[p.wk], p.heads)?;
            if let Some(inj) = residual {
                scores = tape.inject(scores, inj.init, inj.scale)?;
            }
            let (attn, probs) = attention_apply(tape, scores, h, vars[p.wv], Some(vars[p.bv]), vars[p.wo], Some(vars[p.bo]))?;
            let z = tape.add(z, attn)?;
            let z = ffn(tape, vars, &p.ffn, z)?;
            Ok(BlockOutput { z, scores, probs })
        }
        LayerParams::La(p) => {
            let prev = incoming.ok_or_else(|| {
                Error::invalid("block_forward", format!("LA layer {position} has no stored scores to transform"))
            })?;
            let h = tape.layer_norm(z, Some(vars[p.ln_g]), Some(vars[p.ln_b]), ops::LAYER_NORM_EPS)?;
            let scores = la_transform(
                tape,
                prev,
                vars[p.theta_w],
                p.theta_b.map(|i| vars[i]),
                vars[p.psi_w],
                p.psi_b.map(|i| vars[i]),
            )?;
            let (attn, probs) = attention_apply(tape, scores, h, vars[p.wv], Some(vars[p.bv]), vars[p.wo], Some(vars[p.bo]))?;
            let z = tape.add(z, attn)?;
            let z = ffn(tape, vars, &p.ffn, z)?;
            Ok(BlockOutput { z, scores, probs })
        }
    }
}

/// Tensor-level [`va_scores`].
pub fn va_scores_tensor(z: &Tensor, wq: &Tensor, bq: Option<&Tensor>, wk: &Tensor, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant_ref(z);
    let wq = tape.constant_ref(wq);
    let bq = bq.map(|b| tape.constant_ref(b));
    let wk = tape.constant_ref(wk);
    let out = va_scores(&mut tape, z, wq, bq, wk, heads)?;
    Ok(tape.value(out).clone())
}

/// Tensor-level [`la_transform`].
pub fn la_transform_tensor(
    a: &Tensor,
    theta_w: &Tensor,
    theta_b: Option<&Tensor>,
    psi_w: &Tensor,
    psi_b: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant_ref(a);
    let tw = tape.constant_ref(theta_w);
    let tb = theta_b.map(|b| tape.constant_ref(b));
    let pw = tape.constant_ref(psi_w);
    let pb = psi_b.map(|b| tape.constant_ref(b));
    let out = la_transform(&mut tape, a, tw, tb, pw, pb)?;
    Ok(tape.value(out).clone())
}

/// Tensor-level [`attention_apply`], returning only the projected output.
pub fn attention_apply_tensor(
    scores: &Tensor,
    z: &Tensor,
    wv: &Tensor,
    bv: Option<&Tensor>,
    wo: &Tensor,
    bo: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant_ref(scores);
    let z = tape.constant_ref(z);
    let wv = tape.constant_ref(wv);
    let bv = bv.map(|b| tape.constant_ref(b));
    let wo = tape.constant_ref(wo);
    let bo = bo.map(|b| tape.constant_ref(b));
    let (out, _) = attention_apply(&mut tape, s, z, wv, bv, wo, bo)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_score() {
        let z = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::eye(4);
        let s = va_scores_tensor(&z, &eye, None, &eye, 2).unwrap();
        let d = 2f64.sqrt();
        assert_eq!(s.shape(), &[2, 1, 1]);
        assert!((s.data()[0] - 5.0 / d).abs() < 1e-12);
        assert!((s.data()[1] - 25.0 / d).abs() < 1e-12);
    }

    #[test]
    fn zero_tokens_give_zero_scores() {
        let z = Tensor::zeros(&[3, 4]);
        let w = Tensor::ones(&[4, 4]);
        let s = va_scores_tensor(&z, &w, None, &w, 2).unwrap();
        assert_eq!(s, Tensor::zeros(&[2, 3, 3]));
        assert!(va_scores_tensor(&z, &w, None, &w, 3).is_err());
    }

    #[test]
    fn identity_transforms_keep_scores() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = la_transform_tensor(&a, &Tensor::eye(2), None, &Tensor::eye(2), None).unwrap();
        assert_eq!(out, a);
        assert!(la_transform_tensor(&a, &Tensor::eye(3), None, &Tensor::eye(3), None).is_err());
    }

    #[test]
    fn uniform_scores_average_values() {
        let scores = Tensor::zeros(&[1, 3, 3]);
        let z = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, 6.0, 3.0]).unwrap();
        let out = attention_apply_tensor(&scores, &z, &Tensor::eye(2), None, &Tensor::eye(2), None).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn la_without_incoming_is_an_error() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..20).map(|_| tape.param(Tensor::zeros(&[1]))).collect();
        let ffn = FfnParams { ln_g: 0, ln_b: 0, fc1_w: 0, fc1_b: 0, fc2_w: 0, fc2_b: 0 };
        let layer = LayerParams::La(LaLayerParams {
            heads: 1, ln_g: 0, ln_b: 0, theta_w: 0, theta_b: None, psi_w: 0, psi_b: None,
            wv: 0, bv: 0, wo: 0, bo: 0, ffn,
        });
        let z = tape.param(Tensor::zeros(&[2, 2]));
        let err = block_forward(&mut tape, &vars, &layer, z, None, None, 1).unwrap_err();
        assert!(err.to_string().contains("no stored scores"));
    }
}

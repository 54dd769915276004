//! Forward kernels. Every function here is pure; the gradient tape wraps
//! them and adds the backward rules and FLOPs metering.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// `out[m,n] += a[m,k] * b[k,n]` over raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank("matmul", a, 2)?;
    check_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank("bmm", a, 3)?;
    check_rank("bmm", b, 3)?;
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if b.shape()[0] != bs || b.shape()[1] != k {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let n = b.shape()[2];
    let mut out = vec![0.0; bs * m * n];
    for i in 0..bs {
        gemm_acc(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_parts(vec![bs, m, n], out))
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut out = a.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Maps every row `r` of `x` (viewed as `[rows, in]`) to `r * w + b`.
pub fn linear_rowwise(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check_rank("linear", w, 2)?;
    let (input, output) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != input {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [output] {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * output];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(output) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_acc(x.data(), w.data(), &mut out, rows, input, output);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = output;
    Ok(Tensor::from_parts(shape, out))
}

pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::invalid("transpose_last2", format!("rank {} < 2", a.rank())));
    }
    let r = a.rank();
    let (m, n) = (a.shape()[r - 2], a.shape()[r - 1]);
    let batch = a.len() / (m * n);
    let src = a.data();
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

/// Depthwise convolution with kernel = stride = `rate`, no padding.
pub fn dwconv_square(a: &Tensor, kernels: &Tensor, rate: usize) -> Result<Tensor> {
    check_rank("dwconv", a, 3)?;
    check_rank("dwconv", kernels, 3)?;
    let (c, s, s2) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if s != s2 {
        return Err(Error::invalid("dwconv", format!("input maps must be square, got {:?}", a.shape())));
    }
    if rate == 0 || s % rate != 0 {
        return Err(Error::invalid("dwconv", format!("side {s} is not divisible by rate {rate}")));
    }
    if kernels.shape() != [c, rate, rate] {
        return Err(Error::shape("dwconv kernels", a.shape(), kernels.shape()));
    }
    let o = s / rate;
    let src = a.data();
    let k = kernels.data();
    let mut out = vec![0.0; c * o * o];
    for ch in 0..c {
        for i in 0..o {
            for j in 0..o {
                let mut acc = 0.0;
                for u in 0..rate {
                    for v in 0..rate {
                        acc += k[(ch * rate + u) * rate + v] * src[(ch * s + i * rate + u) * s + j * rate + v];
                    }
                }
                out[(ch * o + i) * o + j] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, o, o], out))
}

/// Pointwise convolution mixing channels: `out[o,i,j] = b[o] + sum_c w[o,c] a[c,i,j]`.
pub fn conv1x1_channels(a: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank("conv1x1", a, 3)?;
    check_rank("conv1x1", w, 2)?;
    let (c_in, h, wd) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let c_out = w.shape()[0];
    if w.shape()[1] != c_in {
        return Err(Error::shape("conv1x1", a.shape(), w.shape()));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape("conv1x1 bias", w.shape(), b.shape()));
    }
    let px = h * wd;
    let mut out = vec![0.0; c_out * px];
    for (o, row) in out.chunks_exact_mut(px).enumerate() {
        row.fill(b.data()[o]);
    }
    gemm_acc(w.data(), a.data(), &mut out, c_out, c_in, px);
    Ok(Tensor::from_parts(vec![c_out, h, wd], out))
}

/// Per-row mean and reciprocal standard deviation.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Layer normalization over the trailing dimension. Missing affine
/// parameters act as `gamma = 1`, `beta = 0`.
pub fn layer_norm(x: &Tensor, gamma: Option<&Tensor>, beta: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    for p in [gamma, beta].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), p.shape()));
        }
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let (mean, rstd) = row_stats(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            let mut y = (*v - mean) * rstd;
            if let Some(g) = gamma {
                y *= g.data()[j];
            }
            if let Some(b) = beta {
                y += b.data()[j];
            }
            *v = y;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Mean over the rows of `[N, D]`, giving `[D]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    check_rank("mean_rows", x, 2)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(Tensor::from_parts(vec![d], out))
}

/// Output element `i` reads input element `index[i]`, or zero for `None`.
pub fn gather(x: &Tensor, index: &[Option<usize>], shape: Vec<usize>) -> Tensor {
    let src = x.data();
    let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
    Tensor::from_parts(shape, data)
}

/// Index map for `[N, D] -> [H, N, D/H]`; head `h` owns columns `[h*d, (h+1)*d)`.
pub fn split_heads_index(n: usize, dim: usize, heads: usize) -> Vec<Option<usize>> {
    let d = dim / heads;
    let mut idx = Vec::with_capacity(n * dim);
    for h in 0..heads {
        for i in 0..n {
            for c in 0..d {
                idx.push(Some(i * dim + h * d + c));
            }
        }
    }
    idx
}

/// Index map for `[H, N, d] -> [N, H*d]`, the inverse of [`split_heads_index`].
pub fn merge_heads_index(n: usize, dim: usize, heads: usize) -> Vec<Option<usize>> {
    let d = dim / heads;
    let mut idx = Vec::with_capacity(n * dim);
    for i in 0..n {
        for h in 0..heads {
            for c in 0..d {
                idx.push(Some((h * n + i) * d + c));
            }
        }
    }
    idx
}

pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    check_rank("split_heads", x, 2)?;
    let (n, dim) = (x.shape()[0], x.shape()[1]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid("split_heads", format!("width {dim} not divisible by {heads} heads")));
    }
    Ok(gather(x, &split_heads_index(n, dim, heads), vec![heads, n, dim / heads]))
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    check_rank("merge_heads", x, 3)?;
    let (h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(gather(x, &merge_heads_index(n, h * d, h), vec![n, h * d]))
}

/// Index map cutting an image `[C, H, W]` into non-overlapping `p x p`
/// patches, giving `[H*W/p^2, C*p*p]` with feature order `(c, u, v)`.
pub fn patchify_index(c: usize, h: usize, w: usize, p: usize) -> Vec<Option<usize>> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for gi in 0..gh {
        for gj in 0..gw {
            for ch in 0..c {
                for u in 0..p {
                    for v in 0..p {
                        idx.push(Some((ch * h + gi * p + u) * w + gj * p + v));
                    }
                }
            }
        }
    }
    idx
}

/// Index map grouping a row-major token grid `[rows*cols, D]` into `k x k`
/// windows, giving `[(rows/k)*(cols/k), k*k*D]` with feature order `(u, v, d)`.
pub fn token_window_index(rows: usize, cols: usize, dim: usize, k: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(rows * cols * dim);
    for gi in 0..rows / k {
        for gj in 0..cols / k {
            for u in 0..k {
                for v in 0..k {
                    let token = (gi * k + u) * cols + gj * k + v;
                    for c in 0..dim {
                        idx.push(Some(token * dim + c));
                    }
                }
            }
        }
    }
    idx
}

/// Index map embedding `[H, n, n]` into the top-left of `[H, n+extra, n+extra]` with zeros elsewhere.
pub fn pad_square_index(heads: usize, n: usize, extra: usize) -> Vec<Option<usize>> {
    let m = n + extra;
    let mut idx = Vec::with_capacity(heads * m * m);
    for h in 0..heads {
        for i in 0..m {
            for j in 0..m {
                idx.push((i < n && j < n).then(|| (h * n + i) * n + j));
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let m = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(matmul(&Tensor::eye(3), &m).unwrap(), m);
        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::ones(&[3, 2])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_simple_rows() {
        let s = softmax_rows(&t(&[2, 2], &[0., 0., 1000., 1000.]));
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn linear_hand_example() {
        let x = t(&[1, 2], &[1., 1.]);
        let w = t(&[2, 2], &[2., 0., 0., 3.]);
        let b = t(&[2], &[1., 1.]);
        assert_eq!(linear_rowwise(&x, &w, Some(&b)).unwrap().data(), &[3., 4.]);
        assert!(linear_rowwise(&x, &Tensor::eye(3), None).is_err());
    }

    #[test]
    fn transpose_small() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(transpose_last2(&a).unwrap().data(), &[1., 3., 2., 4.]);
        assert!(transpose_last2(&t(&[3], &[1., 2., 3.])).is_err());
    }

    #[test]
    fn dwconv_averaging_and_selector() {
        let a = Tensor::full(&[1, 4, 4], 3.0);
        let k = Tensor::full(&[1, 2, 2], 0.25);
        assert_eq!(dwconv_square(&a, &k, 2).unwrap(), Tensor::full(&[1, 2, 2], 3.0));

        let a = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let sel = t(&[1, 2, 2], &[1., 0., 0., 0.]);
        assert_eq!(dwconv_square(&a, &sel, 2).unwrap().data(), &[0., 2., 8., 10.]);
        assert!(dwconv_square(&Tensor::zeros(&[1, 5, 5]), &Tensor::zeros(&[1, 2, 2]), 2).is_err());
    }

    #[test]
    fn conv1x1_sum_of_channels() {
        let mut a = Tensor::ones(&[2, 2, 2]);
        for v in &mut a.data_mut()[4..] {
            *v = 2.0;
        }
        let out = conv1x1_channels(&a, &t(&[1, 2], &[1., 1.]), &t(&[1], &[0.])).unwrap();
        assert_eq!(out, Tensor::full(&[1, 2, 2], 3.0));
        let same = conv1x1_channels(&a, &Tensor::eye(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn layer_norm_degenerate_and_normalized() {
        let beta = t(&[3], &[0.5, -1., 2.]);
        let out = layer_norm(&Tensor::full(&[1, 3], 7.0), Some(&Tensor::ones(&[3])), Some(&beta), LAYER_NORM_EPS).unwrap();
        assert_eq!(out.data(), beta.data());
        let out = layer_norm(&t(&[1, 2], &[1., -1.]), None, None, LAYER_NORM_EPS).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((out.data()[0] - expect).abs() < 1e-15);
        assert!((out.data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn head_split_merge_round_trip() {
        let x = Tensor::new(vec![3, 6], (0..18).map(f64::from).collect()).unwrap();
        let s = split_heads(&x, 2).unwrap();
        assert_eq!(s.shape(), &[2, 3, 3]);
        assert_eq!(s.get(&[1, 0, 0]), 3.0);
        assert_eq!(merge_heads(&s).unwrap(), x);
    }

    #[test]
    fn patchify_shape() {
        let idx = patchify_index(1, 8, 8, 4);
        assert_eq!(idx.len(), 64);
        // second patch starts at column 4 of row 0
        assert_eq!(idx[16], Some(4));
    }
}

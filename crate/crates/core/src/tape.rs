//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations execute eagerly and are appended to the tape in execution
//! order; [`Tape::backward`] replays them in exactly the reverse order.
//! Leaves created with [`Tape::constant`] never receive gradients, and
//! nodes that depend only on constants are skipped during the backward
//! sweep.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::{self, DpOptions};
use crate::meter::{self, FlopMeter, Flops};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Index = Arc<[Option<usize>]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Softmax(Var),
    Transpose(Var),
    DwConv { a: Var, k: Var, rate: usize },
    Conv1x1 { a: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64 },
    Gelu(Var),
    Gather { x: Var, index: Index },
    Reshape(Var),
    MeanRows(Var),
    Stack(Vec<Var>),
    ConcatRows(Vec<Var>),
    Inject { a: Var, init: Var, scale: Var },
    DpLoss { a: Var, opts: DpOptions },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    meter: FlopMeter,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn meter(&self) -> &FlopMeter {
        &self.meter
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf that owns its value.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Differentiable leaf borrowing its value, e.g. from a parameter store.
    pub fn param_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], cost: Flops) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.meter.record(cost);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let cost = Flops::matmul(m, k, out.shape()[1]);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b], cost))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b))?;
        let s = self.shape(a);
        let cost = Flops::matmul(s[0] * s[1], s[2], out.shape()[2]);
        Ok(self.push(out, Op::Bmm(a, b), &[a, b], cost))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear_rowwise(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ws = self.shape(w);
        let cost = Flops::linear(self.value(x).rows(), ws[0], ws[1], b.is_some());
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents, cost))
    }

    /// Elementwise sum; metered as a residual add.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let cost = Flops::elementwise(out.len(), meter::ADD_COST);
        Ok(self.push(out, Op::Add(a, b), &[a, b], cost))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let cost = Flops::elementwise(out.len(), meter::SCALE_COST);
        self.push(out, Op::Scale(a, s), &[a], cost)
    }

    /// Sum of scalar-shaped values. Loss bookkeeping; not metered.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in items {
            total += self.value(v).scalar_value()?;
        }
        Ok(self.push(Tensor::scalar(total), Op::Sum(items.to_vec()), items, Flops::ZERO))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        let cost = Flops::elementwise(out.len(), meter::SOFTMAX_COST);
        self.push(out, Op::Softmax(a), &[a], cost)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose_last2(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a], Flops::ZERO))
    }

    pub fn dwconv_square(&mut self, a: Var, k: Var, rate: usize) -> Result<Var> {
        let out = ops::dwconv_square(self.value(a), self.value(k), rate)?;
        let cost = Flops::dwconv(out.shape()[0], out.shape()[1], rate);
        Ok(self.push(out, Op::DwConv { a, k, rate }, &[a, k], cost))
    }

    pub fn conv1x1(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv1x1_channels(self.value(a), self.value(w), self.value(b))?;
        let s = out.shape();
        let cost = Flops::conv1x1(self.shape(a)[0], s[0], s[1] * s[2]);
        Ok(self.push(out, Op::Conv1x1 { a, w, b }, &[a, w, b], cost))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), gamma.map(|g| self.value(g)), beta.map(|b| self.value(b)), eps)?;
        let cost = Flops::norm(out.len(), gamma.is_some() || beta.is_some());
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, &parents, cost))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let cost = Flops::elementwise(out.len(), meter::GELU_COST);
        self.push(out, Op::Gelu(x), &[x], cost)
    }

    pub fn gather(&mut self, x: Var, index: Index, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid("gather", format!("index length {} does not fill {shape:?}", index.len())));
        }
        let n = self.value(x).len();
        if index.iter().flatten().any(|&i| i >= n) {
            return Err(Error::invalid("gather", "index out of range"));
        }
        let out = ops::gather(self.value(x), &index, shape);
        Ok(self.push(out, Op::Gather { x, index }, &[x], Flops::ZERO))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x], Flops::ZERO))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_rows(self.value(x))?;
        let cost = Flops::elementwise(self.value(x).len(), meter::POOL_COST);
        Ok(self.push(out, Op::MeanRows(x), &[x], cost))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = items.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(out, Op::Stack(items.to_vec()), items, Flops::ZERO))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(&mut self, items: &[Var]) -> Result<Var> {
        let first = self.shape(items[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in items {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::ConcatRows(items.to_vec()), items, Flops::ZERO))
    }

    /// `a[h] + scale[h] * init[h]` per leading index `h`.
    pub fn inject(&mut self, a: Var, init: Var, scale: Var) -> Result<Var> {
        let out = inject_forward(self.value(a), self.value(init), self.value(scale))?;
        let cost = Flops::elementwise(out.len(), meter::INJECT_COST);
        Ok(self.push(out, Op::Inject { a, init, scale }, &[a, init, scale], cost))
    }

    pub fn dp_loss(&mut self, a: Var, opts: DpOptions) -> Result<Var> {
        let v = losses::dp_loss_with(self.value(a), opts)?;
        Ok(self.push(Tensor::scalar(v), Op::DpLoss { a, opts }, &[a], Flops::ZERO))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = losses::cross_entropy(self.value(logits), labels)?;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(v), op, &[logits], Flops::ZERO))
    }

    /// Backpropagates from a scalar-valued `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_scaled(root, 1.0)
    }

    /// Backpropagates `seed * d(root)/d(.)`.
    pub fn backward_scaled(&self, root: Var, seed: f64) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::invalid("backward", format!("root must be scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), seed));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    ops::gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    ops::gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        ops::gemm_nt_acc(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(*a, Tensor::from_parts(vec![bs, m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        ops::gemm_tn_acc(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(*b, Tensor::from_parts(vec![bs, k, n], gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (input, output) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * input];
                    ops::gemm_nt_acc(g.data(), wv.data(), &mut gx, rows, output, input);
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; input * output];
                    ops::gemm_tn_acc(xv.data(), g.data(), &mut gw, rows, input, output);
                    acc(*w, Tensor::from_parts(vec![input, output], gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; output];
                        for row in g.data().chunks_exact(output) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        acc(*b, Tensor::from_parts(vec![output], gb));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Sum(items) => {
                for &v in items {
                    acc(v, Tensor::full(self.shape(v), g.data()[0]));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(g.data().chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Transpose(a) => acc(*a, ops::transpose_last2(g).expect("rank checked in forward")),
            Op::DwConv { a, k, rate } => {
                let (av, kv) = (self.value(*a), self.value(*k));
                let r = *rate;
                let (c, s) = (av.shape()[0], av.shape()[1]);
                let o = s / r;
                let mut ga = vec![0.0; av.len()];
                let mut gk = vec![0.0; kv.len()];
                for ch in 0..c {
                    for i in 0..o {
                        for j in 0..o {
                            let gv = g.data()[(ch * o + i) * o + j];
                            for u in 0..r {
                                for v in 0..r {
                                    let ai = (ch * s + i * r + u) * s + j * r + v;
                                    let ki = (ch * r + u) * r + v;
                                    ga[ai] += kv.data()[ki] * gv;
                                    gk[ki] += av.data()[ai] * gv;
                                }
                            }
                        }
                    }
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                acc(*k, Tensor::from_parts(kv.shape().to_vec(), gk));
            }
            Op::Conv1x1 { a, w, b } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
                let px = av.len() / c_in;
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    ops::gemm_tn_acc(wv.data(), g.data(), &mut ga, c_out, c_in, px);
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; c_out * c_in];
                    ops::gemm_nt_acc(g.data(), av.data(), &mut gw, c_out, px, c_in);
                    acc(*w, Tensor::from_parts(vec![c_out, c_in], gw));
                }
                let gb = g.data().chunks_exact(px).map(|r| r.iter().sum()).collect();
                acc(*b, Tensor::from_parts(vec![c_out], gb));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let gam = gamma.map(|v| self.value(v).data());
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for ((xr, gr), out) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let (mean, rstd) = ops::row_stats(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        gxhat[j] = gr[j] * gam.map_or(1.0, |g| g[j]);
                        gg[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                if let Some(gv) = gamma {
                    acc(*gv, Tensor::from_parts(vec![d], gg));
                }
                if let Some(bv) = beta {
                    acc(*bv, Tensor::from_parts(vec![d], gbeta));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&x, &g)| g * ops::gelu_grad_scalar(x)).collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for (i, gv) in index.iter().zip(g.data()) {
                    if let Some(i) = i {
                        gx[*i] += gv;
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Reshape(x) => acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec())),
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let mut gx = Vec::with_capacity(xv.len());
                for _ in 0..n {
                    gx.extend(g.data().iter().map(|v| v / n as f64));
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Stack(items) => {
                let inner = g.len() / items.len();
                for (i, &v) in items.iter().enumerate() {
                    let part = g.data()[i * inner..(i + 1) * inner].to_vec();
                    acc(v, Tensor::from_parts(self.shape(v).to_vec(), part));
                }
            }
            Op::ConcatRows(items) => {
                let mut offset = 0;
                for &v in items {
                    let n = self.value(v).len();
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(v, Tensor::from_parts(self.shape(v).to_vec(), part));
                }
            }
            Op::Inject { a, init, scale } => {
                acc(*a, g.clone());
                let (iv, sv) = (self.value(*init), self.value(*scale));
                let h = sv.len();
                let inner = iv.len() / h;
                let mut gi = vec![0.0; iv.len()];
                let mut gs = vec![0.0; h];
                for k in 0..h {
                    let s = sv.data()[k];
                    for t in k * inner..(k + 1) * inner {
                        gi[t] = s * g.data()[t];
                        gs[k] += g.data()[t] * iv.data()[t];
                    }
                }
                acc(*init, Tensor::from_parts(iv.shape().to_vec(), gi));
                acc(*scale, Tensor::from_parts(sv.shape().to_vec(), gs));
            }
            Op::DpLoss { a, opts } => {
                let grad = losses::dp_loss_grad(self.value(*a), *opts).expect("shape checked in forward");
                acc(*a, grad.scale(g.data()[0]));
            }
            Op::CrossEntropy { logits, labels } => {
                let grad = losses::cross_entropy_grad(self.value(*logits), labels);
                acc(*logits, grad.scale(g.data()[0]));
            }
        }
    }
}

pub(crate) fn inject_forward(a: &Tensor, init: &Tensor, scale: &Tensor) -> Result<Tensor> {
    if a.shape() != init.shape() {
        return Err(Error::shape("inject_residual", a.shape(), init.shape()));
    }
    let h = a.shape()[0];
    if scale.shape() != [h] {
        return Err(Error::shape("inject_residual layerscale", a.shape(), scale.shape()));
    }
    let inner = a.len() / h;
    let mut out = a.data().to_vec();
    for k in 0..h {
        let s = scale.data()[k];
        for t in k * inner..(k + 1) * inner {
            out[t] += s * init.data()[t];
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

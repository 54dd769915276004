//! Central-difference verification of tape gradients, and the suite of
//! checks covering every differentiable operation.

use crate::attention::{self, block_forward, FfnParams, Injection, LaLayerParams, LayerParams, VaLayerParams};
use crate::config::{ImageSize, ModelConfig, StageConfig};
use crate::error::{Error, Result};
use crate::losses::DpOptions;
use crate::model::LaViTModel;
use crate::ops;
use crate::residual::{self, AttnResidualParams};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and a central difference with the given step, where each coordinate's
/// error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and the differentiable input leaf and must
/// return a scalar-shaped node.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    gradient_check_all(|t, v| f(t, v[0]), std::slice::from_ref(x), step)
}

/// [`gradient_check`] over several inputs at once; the error is the worst
/// coordinate across all of them.
pub fn gradient_check_all<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param_ref(x)).collect();
        let y = f(&mut tape, &vars)?;
        if tape.value(y).len() != 1 {
            return Err(Error::invalid(
                "gradient_check",
                format!("function output has shape {:?}, expected a scalar", tape.shape(y)),
            ));
        }
        let mut grads = tape.backward(y)?;
        vars.iter().zip(inputs).map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape()))).collect()
    };
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| tape.constant_ref(x)).collect();
        let y = f(&mut tape, &vars)?;
        tape.value(y).scalar_value()
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for whole VA and LA blocks on small geometries. Coordinates with
/// gradients near 1e-4 sit at about 1e-6 relative roundoff, so the suite
/// holds blocks to the operation bound.
pub const BLOCK_TOLERANCE: f64 = OP_TOLERANCE;
/// Bound for the end-to-end toy model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`run_check`], in suite order.
pub const SUITE: &[&str] = &[
    "matmul",
    "bmm",
    "softmax",
    "linear",
    "dwconv",
    "conv1x1",
    "layer_norm",
    "gelu",
    "la_transform",
    "attention_residual",
    "dp_loss",
    "cross_entropy",
    "va_block",
    "la_block",
    "toy_model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `sum(w * y)` for a constant weight tensor, so every output coordinate
/// reaches the objective with a distinct generic weight.
fn weighted(tape: &mut Tape<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[1, n])?;
    let wv = tape.constant(w.reshape(&[n, 1])?);
    let s = tape.matmul(flat, wv)?;
    tape.reshape(s, &[1])
}

/// Image geometry of the end-to-end check: batch of 2, 8x8, two stages,
/// where the first layer of the second stage receives the attention
/// residual and feeds an LA layer.
pub fn toy_check_config() -> ModelConfig {
    let mut cfg = ModelConfig::preset("toy").expect("toy preset exists");
    cfg.image_size = ImageSize::Square(8);
    cfg.in_channels = 2;
    cfg.patch_size = 2;
    cfg.num_classes = 3;
    cfg.mlp_ratio = 2;
    cfg.stages = vec![
        StageConfig { channels: 4, blocks: 1, heads: 1, n_la: 0 },
        StageConfig { channels: 8, blocks: 2, heads: 2, n_la: 2 },
    ];
    cfg
}

fn toy_model_check(seed: u64) -> Result<f64> {
    let cfg = toy_check_config();
    let mut model = LaViTModel::build(&cfg, seed)?;
    // Scale the small initial weights up so every gradient is well above
    // the finite-difference noise floor.
    let mut rng = SeededRng::derived(seed, "gradcheck.toy.params");
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let (h, w) = cfg.image_size.hw();
    let images: Vec<Tensor> = (0..2).map(|_| rng.uniform_tensor(&[cfg.in_channels, h, w], 0.0, 1.0)).collect();
    let labels = [0usize, 2];
    let inputs = model.params.tensors().to_vec();
    let model = &model;
    gradient_check_all(
        |tape, vars| {
            let mut terms = Vec::new();
            let mut probe_rng = SeededRng::derived(seed, "gradcheck.toy.probe");
            for (img, &label) in images.iter().zip(&labels) {
                let x = tape.constant(img.clone());
                let trace = model.forward_sample(tape, vars, x)?;
                let k = tape.shape(trace.logits)[0];
                let logits = tape.reshape(trace.logits, &[1, k])?;
                let ce = tape.cross_entropy(logits, &[label])?;
                terms.push(tape.scale(ce, 0.5));
                for &(_, _, dp) in &trace.dp_terms {
                    terms.push(tape.scale(dp, 0.005));
                }
                // A confident prediction flattens the cross-entropy, and row-constant
                // shifts of the scores (the psi bias) cancel in the softmax, so probe
                // logits and scores directly as well.
                let w = probe_rng.normal_tensor(&[1, k], 1.0);
                terms.push(weighted(tape, logits, &w)?);
                for layer in &trace.layers {
                    let w = probe_rng.normal_tensor(tape.shape(layer.scores), 0.1);
                    terms.push(weighted(tape, layer.scores, &w)?);
                }
            }
            tape.sum_scalars(&terms)
        },
        &inputs,
        DEFAULT_STEP,
    )
}

fn ffn_ids(base: usize) -> FfnParams {
    FfnParams { ln_g: base, ln_b: base + 1, fc1_w: base + 2, fc1_b: base + 3, fc2_w: base + 4, fc2_b: base + 5 }
}

fn ffn_inputs(rng: &mut SeededRng, d: usize, hidden: usize) -> Vec<Tensor> {
    vec![
        rng.uniform_tensor(&[d], 0.5, 1.5),
        rng.normal_tensor(&[d], 0.3),
        rng.normal_tensor(&[d, hidden], 0.5),
        rng.normal_tensor(&[hidden], 0.3),
        rng.normal_tensor(&[hidden, d], 0.5),
        rng.normal_tensor(&[d], 0.3),
    ]
}

fn block_check(la: bool, seed: u64) -> Result<f64> {
    let (n, d, h, hidden) = (5, 8, 2, 12);
    let mut rng = SeededRng::derived(seed, if la { "gradcheck.la_block" } else { "gradcheck.va_block" });
    let mut inputs = vec![rng.normal_tensor(&[n, d], 1.0), rng.uniform_tensor(&[d], 0.5, 1.5), rng.normal_tensor(&[d], 0.3)];
    let layer = if la {
        // z, ln, theta w/b, psi w/b, v w/b, o w/b, ffn, incoming scores
        inputs.push(Tensor::eye(n).add(&rng.normal_tensor(&[n, n], 0.3))?);
        inputs.push(rng.normal_tensor(&[n], 0.3));
        inputs.push(Tensor::eye(n).add(&rng.normal_tensor(&[n, n], 0.3))?);
        inputs.push(rng.normal_tensor(&[n], 0.3));
        for _ in 0..2 {
            inputs.push(rng.normal_tensor(&[d, d], 0.5));
            inputs.push(rng.normal_tensor(&[d], 0.3));
        }
        inputs.extend(ffn_inputs(&mut rng, d, hidden));
        inputs.push(rng.normal_tensor(&[h, n, n], 1.0));
        LayerParams::La(LaLayerParams {
            heads: h,
            ln_g: 1,
            ln_b: 2,
            theta_w: 3,
            theta_b: Some(4),
            psi_w: 5,
            psi_b: Some(6),
            wv: 7,
            bv: 8,
            wo: 9,
            bo: 10,
            ffn: ffn_ids(11),
        })
    } else {
        // z, ln, q w/b, k w, v w/b, o w/b, ffn, residual init, layerscale
        inputs.push(rng.normal_tensor(&[d, d], 0.5));
        inputs.push(rng.normal_tensor(&[d], 0.3));
        inputs.push(rng.normal_tensor(&[d, d], 0.5));
        for _ in 0..2 {
            inputs.push(rng.normal_tensor(&[d, d], 0.5));
            inputs.push(rng.normal_tensor(&[d], 0.3));
        }
        inputs.extend(ffn_inputs(&mut rng, d, hidden));
        inputs.push(rng.normal_tensor(&[h, n, n], 1.0));
        inputs.push(rng.uniform_tensor(&[h], 0.2, 0.8));
        LayerParams::Va(VaLayerParams {
            heads: h,
            ln_g: 1,
            ln_b: 2,
            wq: 3,
            bq: 4,
            wk: 5,
            wv: 6,
            bv: 7,
            wo: 8,
            bo: 9,
            ffn: ffn_ids(10),
        })
    };
    let wz = rng.normal_tensor(&[n, d], 1.0);
    let ws = rng.normal_tensor(&[h, n, n], 1.0);
    let last = inputs.len() - 1;
    gradient_check_all(
        |tape, vars| {
            let (incoming, residual) = if la {
                (Some(vars[last]), None)
            } else {
                (None, Some(Injection { init: vars[last - 1], scale: vars[last] }))
            };
            let out = block_forward(tape, vars, &layer, vars[0], incoming, residual, 0)?;
            let a = weighted(tape, out.z, &wz)?;
            let b = weighted(tape, out.scores, &ws)?;
            tape.sum_scalars(&[a, b])
        },
        &inputs,
        DEFAULT_STEP,
    )
}

fn op_check(name: &str, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::derived(seed, &format!("gradcheck.{name}"));
    let mut r = |shape: &[usize]| rng.uniform_tensor(shape, -1.0, 1.0);
    let step = DEFAULT_STEP;
    match name {
        "matmul" => {
            let (a, b, w) = (r(&[3, 4]), r(&[4, 5]), r(&[3, 5]));
            gradient_check_all(|t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y, &w) }, &[a, b], step)
        }
        "bmm" => {
            let (a, b, w) = (r(&[2, 3, 4]), r(&[2, 4, 3]), r(&[2, 3, 3]));
            gradient_check_all(|t, v| { let y = t.bmm(v[0], v[1])?; weighted(t, y, &w) }, &[a, b], step)
        }
        "softmax" => {
            let (x, w) = (r(&[2, 3, 5]).scale(2.0), r(&[2, 3, 5]));
            gradient_check(|t, v| { let y = t.softmax_rows(v); weighted(t, y, &w) }, &x, step)
        }
        "linear" => {
            let (x, wt, b, w) = (r(&[3, 4]), r(&[4, 5]), r(&[5]), r(&[3, 5]));
            gradient_check_all(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; weighted(t, y, &w) }, &[x, wt, b], step)
        }
        "dwconv" => {
            let (a, k, w) = (r(&[2, 4, 4]), r(&[2, 2, 2]), r(&[2, 2, 2]));
            gradient_check_all(|t, v| { let y = t.dwconv_square(v[0], v[1], 2)?; weighted(t, y, &w) }, &[a, k], step)
        }
        "conv1x1" => {
            let (a, wt, b, w) = (r(&[3, 2, 2]), r(&[2, 3]), r(&[2]), r(&[2, 2, 2]));
            gradient_check_all(|t, v| { let y = t.conv1x1(v[0], v[1], v[2])?; weighted(t, y, &w) }, &[a, wt, b], step)
        }
        "layer_norm" => {
            let (x, g, b, w) = (r(&[3, 6]).scale(2.0), r(&[6]), r(&[6]), r(&[3, 6]));
            gradient_check_all(
                |t, v| { let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), ops::LAYER_NORM_EPS)?; weighted(t, y, &w) },
                &[x, g, b],
                step,
            )
        }
        "gelu" => {
            let (x, w) = (r(&[10]).scale(3.0), r(&[10]));
            gradient_check(|t, v| { let y = t.gelu(v); weighted(t, y, &w) }, &x, step)
        }
        "la_transform" => {
            let a = r(&[2, 4, 4]);
            let (tw, tb, pw, pb, w) = (r(&[4, 4]), r(&[4]), r(&[4, 4]), r(&[4]), r(&[2, 4, 4]));
            gradient_check_all(
                |t, v| {
                    let y = attention::la_transform(t, v[0], v[1], Some(v[2]), v[3], Some(v[4]))?;
                    weighted(t, y, &w)
                },
                &[a, tw, tb, pw, pb],
                step,
            )
        }
        "attention_residual" => {
            let inputs = [r(&[2, 8, 8]), r(&[2, 2, 2]), r(&[3, 2]), r(&[3]), r(&[3]), r(&[3, 4, 4])];
            let w = r(&[3, 4, 4]);
            let p = AttnResidualParams { dw_kernels: 1, mix_w: 2, mix_b: 3, norm_g: None, norm_b: None, layerscale: 4, rate: 2 };
            gradient_check_all(
                |t, v| {
                    let init = residual::downsample_attention(t, v, &p, v[0])?;
                    let y = t.inject(v[5], init, v[4])?;
                    weighted(t, y, &w)
                },
                &inputs,
                step,
            )
        }
        "dp_loss" => {
            let a = r(&[2, 5, 5]).scale(2.0);
            gradient_check(|t, v| t.dp_loss(v, DpOptions::default()), &a, step)
        }
        "cross_entropy" => {
            let logits = r(&[3, 4]).scale(2.0);
            gradient_check(|t, v| t.cross_entropy(v, &[0, 3, 1]), &logits, step)
        }
        other => Err(Error::invalid("gradcheck", format!("unknown check {other:?}; known: {}", SUITE.join(", ")))),
    }
}

/// Runs one named check of the suite.
pub fn run_check(name: &str, seed: u64) -> Result<CheckResult> {
    let (err, tolerance) = match name {
        "va_block" => (block_check(false, seed)?, BLOCK_TOLERANCE),
        "la_block" => (block_check(true, seed)?, BLOCK_TOLERANCE),
        "toy_model" => (toy_model_check(seed)?, MODEL_TOLERANCE),
        _ => (op_check(name, seed)?, OP_TOLERANCE),
    };
    Ok(CheckResult { name: name.to_string(), max_rel_err: err, tolerance })
}

pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    SUITE.iter().map(|n| run_check(n, seed)).collect()
}

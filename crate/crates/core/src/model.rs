//! Full model assembly: patch embedding, stages of VA then LA blocks,
//! strided token downsampling with attention residual bridges, and a
//! pooled classification head.

use std::sync::Arc;

use crate::attention::{self, BlockOutput, FfnParams, Injection, LaLayerParams, LayerParams, VaLayerParams};
use crate::config::{DpTarget, LayerKind, ModelConfig, Pooling, MAX_TOKENS_DEFAULT};
use crate::error::{Error, Result};
use crate::losses::{self, MetricRow};
use crate::meter::Flops;
use crate::ops;
use crate::params::ParameterStore;
use crate::residual::{self, AttnResidualParams};
use crate::rng::SeededRng;
use crate::tape::{Index, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal projection initialization.
pub const INIT_STD: f64 = 0.02;
/// Noise added to the identity initialization of the LA transforms.
pub const TRANSFORM_NOISE_STD: f64 = 0.01;

#[derive(Clone, Debug)]
struct LinearNorm {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Debug)]
struct StageLayout {
    /// Token downsampling from the previous stage; absent for the first stage.
    down: Option<LinearNorm>,
    bridge: Option<AttnResidualParams>,
    layers: Vec<LayerParams>,
    window: Option<Index>,
    pad: Option<Index>,
}

#[derive(Clone, Debug)]
pub struct LaViTModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
    embed: LinearNorm,
    patch_index: Index,
    stages: Vec<StageLayout>,
    cls_token: Option<usize>,
    head: LinearNorm,
}

/// Tape nodes produced by one layer of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub stage: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub scores: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    /// `(stage, layer, loss)` for every LA layer.
    pub dp_terms: Vec<(usize, usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct LayerDiagnostics {
    pub stage: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub scores: Tensor,
    pub probs: Tensor,
}

/// Per-sample record of every layer's pre- and post-softmax attention.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub layers: Vec<LayerDiagnostics>,
}

struct Init<'c> {
    store: ParameterStore,
    seed: u64,
    cfg: &'c ModelConfig,
}

impl Init<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.store.insert(name, t).expect("layout names are unique")
    }

    fn trunc(&mut self, name: String, shape: &[usize]) -> usize {
        let mut rng = SeededRng::derived(self.seed, &name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::ones(shape))
    }

    fn near_identity(&mut self, name: String, n: usize) -> usize {
        let mut rng = SeededRng::derived(self.seed, &name);
        let mut t = rng.normal_tensor(&[n, n], TRANSFORM_NOISE_STD);
        for i in 0..n {
            t.data_mut()[i * n + i] += 1.0;
        }
        self.add(name, t)
    }

    fn linear_norm(&mut self, prefix: &str, input: usize, output: usize) -> LinearNorm {
        LinearNorm {
            w: self.trunc(format!("{prefix}.w"), &[input, output]),
            b: self.zeros(format!("{prefix}.b"), &[output]),
            ln_g: self.ones(format!("{prefix}.ln.g"), &[output]),
            ln_b: self.zeros(format!("{prefix}.ln.b"), &[output]),
        }
    }

    fn ffn(&mut self, prefix: &str, dim: usize, hidden: usize) -> FfnParams {
        FfnParams {
            ln_g: self.ones(format!("{prefix}.ln2.g"), &[dim]),
            ln_b: self.zeros(format!("{prefix}.ln2.b"), &[dim]),
            fc1_w: self.trunc(format!("{prefix}.ffn.fc1.w"), &[dim, hidden]),
            fc1_b: self.zeros(format!("{prefix}.ffn.fc1.b"), &[hidden]),
            fc2_w: self.trunc(format!("{prefix}.ffn.fc2.w"), &[hidden, dim]),
            fc2_b: self.zeros(format!("{prefix}.ffn.fc2.b"), &[dim]),
        }
    }

    fn layer(&mut self, m: usize, l: usize) -> LayerParams {
        let s = &self.cfg.stages[m];
        let (dim, heads, hidden) = (s.channels, s.heads, self.cfg.hidden(m));
        let kind = s.kind(l);
        let p = format!("s{m}.l{l}");
        let ln_g = self.ones(format!("{p}.ln1.g"), &[dim]);
        let ln_b = self.zeros(format!("{p}.ln1.b"), &[dim]);
        match kind {
            LayerKind::Va => {
                let wq = self.trunc(format!("{p}.attn.q.w"), &[dim, dim]);
                let bq = self.zeros(format!("{p}.attn.q.b"), &[dim]);
                let wk = self.trunc(format!("{p}.attn.k.w"), &[dim, dim]);
                let wv = self.trunc(format!("{p}.attn.v.w"), &[dim, dim]);
                let bv = self.zeros(format!("{p}.attn.v.b"), &[dim]);
                let wo = self.trunc(format!("{p}.attn.o.w"), &[dim, dim]);
                let bo = self.zeros(format!("{p}.attn.o.b"), &[dim]);
                let ffn = self.ffn(&p, dim, hidden);
                LayerParams::Va(VaLayerParams { heads, ln_g, ln_b, wq, bq, wk, wv, bv, wo, bo, ffn })
            }
            LayerKind::La => {
                let n = self.cfg.attention_side(m);
                let bias = self.cfg.flags.psi_theta_bias;
                let theta_w = self.near_identity(format!("{p}.attn.theta.w"), n);
                let theta_b = bias.then(|| self.zeros(format!("{p}.attn.theta.b"), &[n]));
                let psi_w = self.near_identity(format!("{p}.attn.psi.w"), n);
                let psi_b = bias.then(|| self.zeros(format!("{p}.attn.psi.b"), &[n]));
                let wv = self.trunc(format!("{p}.attn.v.w"), &[dim, dim]);
                let bv = self.zeros(format!("{p}.attn.v.b"), &[dim]);
                let wo = self.trunc(format!("{p}.attn.o.w"), &[dim, dim]);
                let bo = self.zeros(format!("{p}.attn.o.b"), &[dim]);
                let ffn = self.ffn(&p, dim, hidden);
                LayerParams::La(LaLayerParams {
                    heads, ln_g, ln_b, theta_w, theta_b, psi_w, psi_b, wv, bv, wo, bo, ffn,
                })
            }
        }
    }

    fn bridge(&mut self, m: usize) -> AttnResidualParams {
        let cfg = self.cfg;
        let (h_prev, h_cur) = (cfg.stages[m - 1].heads, cfg.stages[m].heads);
        let rate = cfg.bridge_rate(m);
        let side = cfg.tokens(m);
        let p = format!("s{m}.bridge");
        let dw_kernels = self.trunc(format!("{p}.dw"), &[h_prev, rate, rate]);
        let (norm_g, norm_b) = if cfg.flags.residual_norm_affine {
            (
                Some(self.ones(format!("{p}.norm.g"), &[side * side])),
                Some(self.zeros(format!("{p}.norm.b"), &[side * side])),
            )
        } else {
            (None, None)
        };
        let mix_w = self.trunc(format!("{p}.mix.w"), &[h_cur, h_prev]);
        let mix_b = self.zeros(format!("{p}.mix.b"), &[h_cur]);
        let layerscale = self.add(format!("{p}.ls"), Tensor::full(&[h_cur], cfg.flags.layerscale_init));
        AttnResidualParams { dw_kernels, mix_w, mix_b, norm_g, norm_b, layerscale, rate }
    }
}

impl LaViTModel {
    /// Builds a model with deterministic initialization: every parameter
    /// draws from its own stream derived from `seed` and its name.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut init = Init { store: ParameterStore::new(), seed, cfg };
        let p = cfg.patch_size;
        let d0 = cfg.stages[0].channels;
        let embed = init.linear_norm("embed", cfg.in_channels * p * p, d0);
        let (h, w) = cfg.image_size.hw();
        let patch_index: Index = Arc::from(ops::patchify_index(cfg.in_channels, h, w, p));
        let last = cfg.stages.len() - 1;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (m, s) in cfg.stages.iter().enumerate() {
            let (down, window, bridge) = if m == 0 {
                (None, None, None)
            } else {
                let prev = cfg.stages[m - 1].channels;
                let down = init.linear_norm(&format!("s{m}.down"), 4 * prev, s.channels);
                let (gr, gc) = cfg.grid(m - 1);
                let window: Index = Arc::from(ops::token_window_index(gr, gc, prev, 2));
                let bridge = cfg.flags.attention_residual.then(|| init.bridge(m));
                (Some(down), Some(window), bridge)
            };
            let layers = (0..s.blocks).map(|l| init.layer(m, l)).collect();
            let pad = (m == last && cfg.flags.pooling == Pooling::ClsToken && bridge.is_some())
                .then(|| Arc::from(ops::pad_square_index(s.heads, cfg.tokens(m), 1)));
            stages.push(StageLayout { down, bridge, layers, window, pad });
        }
        let dl = cfg.stages[last].channels;
        let cls_token = (cfg.flags.pooling == Pooling::ClsToken).then(|| init.trunc("cls_token".into(), &[1, dl]));
        let head = LinearNorm {
            ln_g: init.ones("head.ln.g".into(), &[dl]),
            ln_b: init.zeros("head.ln.b".into(), &[dl]),
            w: init.trunc("head.w".into(), &[dl, cfg.num_classes]),
            b: init.zeros("head.b".into(), &[cfg.num_classes]),
        };
        Ok(Self { config: cfg.clone(), params: init.store, embed, patch_index, stages, cls_token, head })
    }

    /// Rebuilds the layout for `config` and takes parameter values from `params`,
    /// which must match the layout name for name and shape for shape.
    pub fn from_parts(config: &ModelConfig, params: ParameterStore) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if model.params.name(i) != name || model.params.by_id(i).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    model.params.name(i),
                    model.params.by_id(i).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Creates one tape leaf per parameter, in store order.
    pub fn param_vars<'t>(&'t self, tape: &mut Tape<'t>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param_ref(t) } else { tape.constant_ref(t) })
            .collect()
    }

    /// Number of Psi/Theta pairs, i.e. LA layers.
    pub fn transform_pairs(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.layers)
            .filter(|l| matches!(l, LayerParams::La(_)))
            .count()
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.image_size.hw();
        let want = [self.config.in_channels, h, w];
        if shape != want {
            return Err(Error::invalid("forward", format!("image shape {shape:?} does not match config {want:?}")));
        }
        Ok(())
    }

    /// Forward pass of one `[C, H, W]` image already on the tape.
    pub fn forward_sample(&self, tape: &mut Tape<'_>, vars: &[Var], image: Var) -> Result<SampleTrace> {
        self.check_image(tape.shape(image))?;
        let cfg = &self.config;
        let (h, w) = cfg.image_size.hw();
        let c = cfg.in_channels;
        let p = cfg.patch_size;
        let patches = tape.gather(image, self.patch_index.clone(), vec![h * w / (p * p), c * p * p])?;
        let mut z = self.linear_norm(tape, vars, &self.embed, patches)?;
        let mut layers = Vec::new();
        let mut dp_terms = Vec::new();
        let mut last_scores: Option<Var> = None;
        let dp_opts = cfg.flags.dp_options();
        for (m, stage) in self.stages.iter().enumerate() {
            if let (Some(down), Some(window)) = (&stage.down, &stage.window) {
                let d_prev = cfg.stages[m - 1].channels;
                let grouped = tape.gather(z, window.clone(), vec![cfg.tokens(m), 4 * d_prev])?;
                z = self.linear_norm(tape, vars, down, grouped)?;
            }
            if let Some(cls) = self.cls_token.filter(|_| m + 1 == self.stages.len()) {
                z = tape.concat_rows(&[z, vars[cls]])?;
            }
            let injection = match (&stage.bridge, last_scores) {
                (Some(bridge), Some(prev)) => {
                    let mut init = residual::downsample_attention(tape, vars, bridge, prev)?;
                    if let Some(pad) = &stage.pad {
                        let n = cfg.attention_side(m);
                        init = tape.gather(init, pad.clone(), vec![cfg.stages[m].heads, n, n])?;
                    }
                    Some(Injection { init, scale: vars[bridge.layerscale] })
                }
                _ => None,
            };
            let mut incoming: Option<Var> = None;
            for (l, layer) in stage.layers.iter().enumerate() {
                let residual = if l == 0 { injection } else { None };
                let BlockOutput { z: z_out, scores, probs } =
                    attention::block_forward(tape, vars, layer, z, incoming, residual, l)?;
                z = z_out;
                let kind = match layer {
                    LayerParams::Va(_) => LayerKind::Va,
                    LayerParams::La(_) => LayerKind::La,
                };
                if kind == LayerKind::La {
                    let target = match cfg.flags.dp_target {
                        DpTarget::PreSoftmax => scores,
                        DpTarget::PostSoftmax => probs,
                    };
                    dp_terms.push((m, l, tape.dp_loss(target, dp_opts)?));
                }
                layers.push(LayerTrace { stage: m, layer: l, kind, scores, probs });
                incoming = Some(scores);
            }
            last_scores = incoming;
        }
        let pooled = match self.cls_token {
            Some(_) => {
                let n = tape.shape(z)[0];
                let d = tape.shape(z)[1];
                let idx: Index = Arc::from((0..d).map(|j| Some((n - 1) * d + j)).collect::<Vec<_>>());
                tape.gather(z, idx, vec![d])?
            }
            None => tape.mean_rows(z)?,
        };
        let normed = tape.layer_norm(pooled, Some(vars[self.head.ln_g]), Some(vars[self.head.ln_b]), ops::LAYER_NORM_EPS)?;
        let logits = tape.linear(normed, vars[self.head.w], Some(vars[self.head.b]))?;
        Ok(SampleTrace { logits, layers, dp_terms })
    }

    fn linear_norm(&self, tape: &mut Tape<'_>, vars: &[Var], p: &LinearNorm, x: Var) -> Result<Var> {
        let y = tape.linear(x, vars[p.w], Some(vars[p.b]))?;
        tape.layer_norm(y, Some(vars[p.ln_g]), Some(vars[p.ln_b]), ops::LAYER_NORM_EPS)
    }

    fn guard_size(&self) -> Result<()> {
        if self.config.tokens(0) > MAX_TOKENS_DEFAULT && !self.config.flags.allow_large {
            return Err(Error::Config(format!(
                "{} first-stage tokens with full attention is analyzer-only; set flags.allow_large to run it",
                self.config.tokens(0)
            )));
        }
        Ok(())
    }

    fn split_batch(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        if images.rank() != 4 {
            return Err(Error::invalid("forward", format!("images must be [B, C, H, W], got {:?}", images.shape())));
        }
        self.check_image(&images.shape()[1..])?;
        Ok((0..images.shape()[0]).map(|b| images.slice0(b)).collect())
    }

    /// Logits `[B, K]` for images `[B, C, H, W]`, optionally with per-sample
    /// attention diagnostics.
    pub fn forward(&self, images: &Tensor, collect_diagnostics: bool) -> Result<(Tensor, Option<Vec<Diagnostics>>)> {
        self.guard_size()?;
        let samples = self.split_batch(images)?;
        let mut logits = Vec::with_capacity(samples.len());
        let mut diags = Vec::new();
        for img in &samples {
            let mut tape = Tape::new();
            let vars = self.param_vars(&mut tape, false);
            let x = tape.constant_ref(img);
            let trace = self.forward_sample(&mut tape, &vars, x)?;
            logits.push(tape.value(trace.logits).clone());
            if collect_diagnostics {
                diags.push(Diagnostics {
                    layers: trace
                        .layers
                        .iter()
                        .map(|t| LayerDiagnostics {
                            stage: t.stage,
                            layer: t.layer,
                            kind: t.kind,
                            scores: tape.value(t.scores).clone(),
                            probs: tape.value(t.probs).clone(),
                        })
                        .collect(),
                });
            }
        }
        Ok((Tensor::stack(&logits)?, collect_diagnostics.then_some(diags)))
    }

    /// Per-layer similarity, symmetry and DP loss averaged over a probe batch.
    /// Similarity compares post-softmax maps with the previous layer of the
    /// same stage; symmetry and DP loss use the scores the DP loss targets.
    pub fn metric_rows(&self, images: &Tensor) -> Result<Vec<MetricRow>> {
        let (_, diags) = self.forward(images, true)?;
        let diags = diags.unwrap_or_default();
        let opts = self.config.flags.dp_options();
        let post = self.config.flags.dp_target == DpTarget::PostSoftmax;
        fn target(l: &LayerDiagnostics, post: bool) -> &Tensor {
            if post {
                &l.probs
            } else {
                &l.scores
            }
        }
        let count = diags.len() as f64;
        let mut rows: Vec<MetricRow> = Vec::new();
        for (si, sample) in diags.iter().enumerate() {
            for (i, l) in sample.layers.iter().enumerate() {
                let similarity = match i.checked_sub(1).map(|j| &sample.layers[j]) {
                    Some(prev) if l.layer > 0 => Some(losses::layer_similarity(&l.probs, &prev.probs)?),
                    _ => None,
                };
                let symmetry = losses::symmetry_score(target(l, post))?;
                let dp = losses::dp_loss_with(target(l, post), opts)?;
                if si == 0 {
                    rows.push(MetricRow { stage: l.stage, layer: l.layer, similarity, symmetry, dp_loss: dp });
                } else {
                    let r = &mut rows[i];
                    r.similarity = r.similarity.zip(similarity).map(|(a, b)| a + b);
                    r.symmetry += symmetry;
                    r.dp_loss += dp;
                }
            }
        }
        for r in &mut rows {
            r.similarity = r.similarity.map(|v| v / count);
            r.symmetry /= count;
            r.dp_loss /= count;
        }
        Ok(rows)
    }

    /// Forward pass of a single image returning the FLOPs the kernels metered.
    pub fn metered_flops(&self, image: &Tensor) -> Result<Flops> {
        let mut tape = Tape::new();
        let vars = self.param_vars(&mut tape, false);
        let x = tape.constant_ref(image);
        self.forward_sample(&mut tape, &vars, x)?;
        Ok(tape.meter().total())
    }
}

/// Non-overlapping `p x p` convolution of images `[B, C, H, W]` with
/// weights `[C*p*p, D]` laid out `(c, u, v)`, giving `[B, H*W/p^2, D]`.
pub fn patch_embed(images: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::invalid("patch_embed", format!("images must be [B, C, H, W], got {:?}", images.shape())));
    }
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid("patch_embed", format!("{h}x{w} is not divisible by patch size {patch}")));
    }
    let idx = ops::patchify_index(c, h, w, patch);
    let n = h * w / (patch * patch);
    let mut out = Vec::new();
    for b in 0..images.shape()[0] {
        let cols = ops::gather(&images.slice0(b), &idx, vec![n, c * patch * patch]);
        out.push(ops::linear_rowwise(&cols, weight, Some(bias))?);
    }
    Tensor::stack(&out)
}

/// Exact number of scalar parameters [`LaViTModel::build`] allocates for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let c = config;
    let p = c.patch_size;
    let linear_norm = |i: usize, o: usize| i * o + o + 2 * o;
    let mut total = linear_norm(c.in_channels * p * p, c.stages[0].channels);
    for (m, s) in c.stages.iter().enumerate() {
        let d = s.channels;
        if m > 0 {
            let prev = &c.stages[m - 1];
            total += linear_norm(4 * prev.channels, d);
            if c.flags.attention_residual {
                let r = c.bridge_rate(m);
                let side = c.tokens(m);
                total += prev.heads * r * r + s.heads * prev.heads + s.heads + s.heads;
                if c.flags.residual_norm_affine {
                    total += 2 * side * side;
                }
            }
        }
        let hidden = c.hidden(m);
        let ffn = 2 * d + d * hidden + hidden + hidden * d + d;
        let n = c.attention_side(m);
        let transform = n * n + if c.flags.psi_theta_bias { n } else { 0 };
        let va = 2 * d + 4 * d * d + 3 * d + ffn;
        let la = 2 * d + 2 * transform + 2 * d * d + 2 * d + ffn;
        total += s.va_layers() * va + s.la_layers() * la;
    }
    let dl = c.stages.last().unwrap().channels;
    if c.flags.pooling == Pooling::ClsToken {
        total += dl;
    }
    total + 2 * dl + dl * c.num_classes + c.num_classes
}

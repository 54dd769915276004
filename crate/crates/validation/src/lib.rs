//! Reference oracles and the paired training protocols the acceptance suite
//! is built on.

use std::path::Path;
use std::time::{Duration, Instant};

use lavit::attention::{attention_apply_tensor, va_scores_tensor};
use lavit::config::{LayerKind, Pooling};
use lavit::model::patch_embed;
use lavit::ops;
use lavit::residual::{downsample_attention_tensor, inject_residual};
use lavit::train::{Collect, SyntheticDataset, TrainConfig, TrainSummary, Trainer};
use lavit::{LaViTModel, ModelConfig, Result, Tensor};

/// `psi^T * a * theta` for every head of `a: [H, N, N]`, by explicit loops.
pub fn closed_form_transform(a: &Tensor, theta: &Tensor, psi: &Tensor) -> Tensor {
    let (h, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[h, n, n]);
    for head in 0..h {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        s += psi.get(&[k, i]) * a.get(&[head, k, l]) * theta.get(&[l, j]);
                    }
                }
                out.set(&[head, i, j], s);
            }
        }
    }
    out
}

/// A named preset, or a config error for unknown names.
pub fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| lavit::Error::Config(format!("unknown preset {name:?}")))
}

fn param<'a>(m: &'a LaViTModel, name: &str) -> Result<&'a Tensor> {
    m.params.get(name).ok_or_else(|| lavit::Error::Config(format!("missing parameter {name}")))
}

/// Mean-pooled forward of one `[C, H, W]` image in which every LA layer
/// reuses the previous layer's scores unchanged, computed from the named
/// parameters with tensor kernels only.
pub fn reuse_oracle(m: &LaViTModel, image: &Tensor) -> Result<Tensor> {
    let cfg = &m.config;
    if cfg.flags.pooling != Pooling::Mean {
        return Err(lavit::Error::Config("the reuse oracle covers mean pooling only".into()));
    }
    let p = |n: &str| param(m, n);
    let lin = |x: &Tensor, w: &str, b: &str| ops::linear_rowwise(x, p(w)?, Some(p(b)?));
    let norm = |x: &Tensor, g: &str, b: &str| ops::layer_norm(x, Some(p(g)?), Some(p(b)?), ops::LAYER_NORM_EPS);
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let tokens = patch_embed(&batch, p("embed.w")?, p("embed.b")?, cfg.patch_size)?.slice0(0);
    let mut z = norm(&tokens, "embed.ln.g", "embed.ln.b")?;
    let mut last: Option<Tensor> = None;
    for (si, s) in cfg.stages.iter().enumerate() {
        let mut init = None;
        if si > 0 {
            let (rows, cols) = cfg.grid(si - 1);
            let d = z.shape()[1];
            let mut gathered = Vec::with_capacity(z.len());
            for gi in 0..rows / 2 {
                for gj in 0..cols / 2 {
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let tok = (2 * gi + u) * cols + 2 * gj + v;
                        gathered.extend_from_slice(&z.data()[tok * d..(tok + 1) * d]);
                    }
                }
            }
            let x = Tensor::new(vec![rows * cols / 4, 4 * d], gathered)?;
            let x = lin(&x, &format!("s{si}.down.w"), &format!("s{si}.down.b"))?;
            z = norm(&x, &format!("s{si}.down.ln.g"), &format!("s{si}.down.ln.b"))?;
            if cfg.flags.attention_residual {
                let b = format!("s{si}.bridge");
                let prev = last.as_ref().expect("earlier stage has layers");
                let a = downsample_attention_tensor(
                    prev,
                    p(&format!("{b}.dw"))?,
                    cfg.bridge_rate(si),
                    None,
                    true,
                    p(&format!("{b}.mix.w"))?,
                    p(&format!("{b}.mix.b"))?,
                )?;
                init = Some((a, p(&format!("{b}.ls"))?.clone()));
            }
        }
        let mut prev: Option<Tensor> = None;
        for l in 0..s.blocks {
            let q = |n: &str| format!("s{si}.l{l}.{n}");
            let h = norm(&z, &q("ln1.g"), &q("ln1.b"))?;
            let scores = match (s.kind(l), prev.take()) {
                (LayerKind::La, Some(a)) => a,
                _ => {
                    let mut a = va_scores_tensor(&h, p(&q("attn.q.w"))?, Some(p(&q("attn.q.b"))?), p(&q("attn.k.w"))?, s.heads)?;
                    if let (0, Some((init, ls))) = (l, &init) {
                        a = inject_residual(&a, init, ls)?;
                    }
                    a
                }
            };
            let attn = attention_apply_tensor(
                &scores,
                &h,
                p(&q("attn.v.w"))?,
                Some(p(&q("attn.v.b"))?),
                p(&q("attn.o.w"))?,
                Some(p(&q("attn.o.b"))?),
            )?;
            z = z.add(&attn)?;
            let f = norm(&z, &q("ln2.g"), &q("ln2.b"))?;
            let f = ops::gelu(&lin(&f, &q("ffn.fc1.w"), &q("ffn.fc1.b"))?);
            z = z.add(&lin(&f, &q("ffn.fc2.w"), &q("ffn.fc2.b"))?)?;
            prev = Some(scores);
        }
        last = prev;
    }
    let pooled = ops::mean_rows(&z)?.reshape(&[1, z.shape()[1]])?;
    let normed = norm(&pooled, "head.ln.g", "head.ln.b")?;
    lin(&normed, "head.w", "head.b")?.reshape(&[cfg.num_classes])
}

/// Sets every transform to the identity and every transform bias and
/// LayerScale to zero.
pub fn make_transforms_identity(m: &mut LaViTModel) {
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = m.params.get_mut(&name).expect("name listed by the store");
        if name.ends_with("theta.w") || name.ends_with("psi.w") {
            *t = Tensor::eye(t.shape()[0]);
        } else if name.ends_with("theta.b") || name.ends_with("psi.b") || name.ends_with(".ls") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// Synthetic data sized for `cfg` and a run's training set plus probe.
pub fn dataset_for(cfg: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<SyntheticDataset> {
    let (h, w) = cfg.image_size.hw();
    SyntheticDataset::new(cfg.in_channels, h, w, cfg.num_classes, train.train_size + train.probe_size, seed)
}

/// Default-recipe toy run stopping at 90% train accuracy.
pub fn smoke_config() -> TrainConfig {
    TrainConfig { target_accuracy: Some(0.9), ..TrainConfig::default() }
}

pub fn smoke_run(seed: u64, out: &Path) -> Result<(TrainSummary, Duration)> {
    let cfg = preset("toy")?;
    let train = smoke_config();
    let data = dataset_for(&cfg, &train, seed)?;
    let mut model = LaViTModel::build(&cfg, seed)?;
    let start = Instant::now();
    let summary = Trainer::new(train, &data, seed).with_output(out).run(&mut model)?;
    Ok((summary, start.elapsed()))
}

fn short_run(steps: usize, dp_weight: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        warmup_steps: steps / 20,
        dp_weight,
        eval_every: 50,
        collect: Collect::Saturation,
        ..TrainConfig::default()
    }
}

fn train_and_probe(name: &str, train: TrainConfig, seed: u64) -> Result<(LaViTModel, TrainSummary)> {
    let cfg = preset(name)?;
    let data = dataset_for(&cfg, &train, seed)?;
    let mut model = LaViTModel::build(&cfg, seed)?;
    let summary = Trainer::new(train, &data, seed).run(&mut model)?;
    Ok((model, summary))
}

#[derive(Clone, Debug)]
pub struct SaturationOutcome {
    pub seed: u64,
    /// Mean consecutive-layer similarity over the LA region, LA model.
    pub la: f64,
    /// The same layer range in the all-VA model.
    pub va: f64,
    pub la_accuracy: f64,
    pub va_accuracy: f64,
}

pub const SATURATION_STEPS: usize = 300;

/// Trains the 12-layer pair (LA from the third layer of the final stage vs
/// all-VA) on identical data, seeds and objective, then compares
/// post-softmax similarity between consecutive layers that both lie in the
/// LA region. The all-VA model has no DP terms, so both train on
/// cross-entropy alone.
pub fn saturation_pair(seed: u64) -> Result<SaturationOutcome> {
    let la_cfg = preset("toy-deep")?;
    let last = la_cfg.stages.len() - 1;
    let first_la = la_cfg.stages[last].n_la - 1;
    let region = |summary: &TrainSummary| {
        let rows = summary.saturation.as_deref().unwrap_or_default();
        let sims: Vec<f64> = rows.iter().filter(|r| r.stage == last && r.layer > first_la).filter_map(|r| r.similarity).collect();
        sims.iter().sum::<f64>() / sims.len() as f64
    };
    let (_, la) = train_and_probe("toy-deep", short_run(SATURATION_STEPS, 0.0), seed)?;
    let (_, va) = train_and_probe("toy-deep-va", short_run(SATURATION_STEPS, 0.0), seed)?;
    Ok(SaturationOutcome {
        seed,
        la: region(&la),
        va: region(&va),
        la_accuracy: la.final_accuracy().unwrap_or(0.0),
        va_accuracy: va.final_accuracy().unwrap_or(0.0),
    })
}

#[derive(Clone, Debug)]
pub struct SymmetryOutcome {
    pub seed: u64,
    pub with_dp: f64,
    pub without_dp: f64,
}

pub const SYMMETRY_STEPS: usize = 150;

/// Final symmetry score of the toy model's LA layers with the DP loss on
/// (weight 1) and off (weight 0).
pub fn symmetry_pair(seed: u64) -> Result<SymmetryOutcome> {
    let cfg = preset("toy")?;
    let score = |w: f64| -> Result<f64> {
        let (_, s) = train_and_probe("toy", short_run(SYMMETRY_STEPS, w), seed)?;
        let rows = s.saturation.unwrap_or_default();
        let la: Vec<f64> =
            rows.iter().filter(|r| cfg.stages[r.stage].kind(r.layer) == LayerKind::La).map(|r| r.symmetry).collect();
        Ok(la.iter().sum::<f64>() / la.len() as f64)
    };
    Ok(SymmetryOutcome { seed, with_dp: score(1.0)?, without_dp: score(0.0)? })
}

use lavit::attention::{attention_apply_tensor, la_transform_tensor, va_scores_tensor};
use lavit::checkpoint;
use lavit::config::{ImageSize, LayerKind, Pooling};
use lavit::model::{param_count, patch_embed};
use lavit::ops;
use lavit::params::ParameterStore;
use lavit::residual::{downsample_attention_tensor, inject_residual};
use lavit::rng::SeededRng;
use lavit::{LaViTModel, ModelConfig, StageConfig, Tensor};

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let (h, w) = cfg.image_size.hw();
    SeededRng::new(seed).uniform_tensor(&[batch, cfg.in_channels, h, w], 0.0, 1.0)
}

/// Small two-stage config with every component present.
fn small() -> ModelConfig {
    let mut cfg = ModelConfig::preset("toy").unwrap();
    cfg.image_size = ImageSize::Square(16);
    cfg.stages = vec![
        StageConfig { channels: 8, blocks: 2, heads: 2, n_la: 2 },
        StageConfig { channels: 12, blocks: 3, heads: 3, n_la: 2 },
    ];
    cfg
}

/// Pushes every parameter away from its structured initialization so no
/// component is an identity or zero by accident.
fn perturbed(cfg: &ModelConfig, seed: u64) -> LaViTModel {
    let mut m = LaViTModel::build(cfg, seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xabc);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    m
}

fn p<'a>(m: &'a LaViTModel, name: &str) -> &'a Tensor {
    m.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    ops::linear_rowwise(x, w, Some(b)).unwrap()
}

fn ln(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    ops::layer_norm(x, Some(g), Some(b), ops::LAYER_NORM_EPS).unwrap()
}

/// 2x2 windows of a row-major token grid, features ordered (u, v, channel).
fn windows(z: &Tensor, rows: usize, cols: usize) -> Tensor {
    let d = z.shape()[1];
    let mut out = Vec::new();
    for gi in 0..rows / 2 {
        for gj in 0..cols / 2 {
            for u in 0..2 {
                for v in 0..2 {
                    let tok = (2 * gi + u) * cols + 2 * gj + v;
                    out.extend_from_slice(&z.data()[tok * d..(tok + 1) * d]);
                }
            }
        }
    }
    Tensor::new(vec![rows * cols / 4, 4 * d], out).unwrap()
}

/// Straight-line forward of one image from named parameters. With `reuse`,
/// LA layers take the previous layer's attention weights as-is.
fn oracle(m: &LaViTModel, image: &Tensor, reuse: bool) -> Tensor {
    let cfg = &m.config;
    let batch = Tensor::stack(std::slice::from_ref(image)).unwrap();
    let tokens = patch_embed(&batch, p(m, "embed.w"), p(m, "embed.b"), cfg.patch_size).unwrap().slice0(0);
    let mut z = ln(&tokens, p(m, "embed.ln.g"), p(m, "embed.ln.b"));
    let mut last: Option<Tensor> = None;
    for (si, s) in cfg.stages.iter().enumerate() {
        let mut init = None;
        if si > 0 {
            let (rows, cols) = cfg.grid(si - 1);
            let x = linear(&windows(&z, rows, cols), p(m, &format!("s{si}.down.w")), p(m, &format!("s{si}.down.b")));
            z = ln(&x, p(m, &format!("s{si}.down.ln.g")), p(m, &format!("s{si}.down.ln.b")));
            if cfg.flags.attention_residual {
                let b = format!("s{si}.bridge");
                let a = downsample_attention_tensor(
                    last.as_ref().unwrap(),
                    p(m, &format!("{b}.dw")),
                    cfg.bridge_rate(si),
                    None,
                    true,
                    p(m, &format!("{b}.mix.w")),
                    p(m, &format!("{b}.mix.b")),
                )
                .unwrap();
                init = Some((a, p(m, &format!("{b}.ls")).clone()));
            }
        }
        let mut prev: Option<Tensor> = None;
        for l in 0..s.blocks {
            let q = |n: &str| p(m, &format!("s{si}.l{l}.{n}"));
            let h = ln(&z, q("ln1.g"), q("ln1.b"));
            let scores = match s.kind(l) {
                LayerKind::Va => {
                    let mut a = va_scores_tensor(&h, q("attn.q.w"), Some(q("attn.q.b")), q("attn.k.w"), s.heads).unwrap();
                    if l == 0 {
                        if let Some((init, ls)) = &init {
                            a = inject_residual(&a, init, ls).unwrap();
                        }
                    }
                    a
                }
                LayerKind::La => {
                    let a = prev.as_ref().unwrap();
                    if reuse {
                        a.clone()
                    } else {
                        la_transform_tensor(a, q("attn.theta.w"), Some(q("attn.theta.b")), q("attn.psi.w"), Some(q("attn.psi.b")))
                            .unwrap()
                    }
                }
            };
            let attn =
                attention_apply_tensor(&scores, &h, q("attn.v.w"), Some(q("attn.v.b")), q("attn.o.w"), Some(q("attn.o.b"))).unwrap();
            z = z.add(&attn).unwrap();
            let f = ln(&z, q("ln2.g"), q("ln2.b"));
            let f = ops::gelu(&linear(&f, q("ffn.fc1.w"), q("ffn.fc1.b")));
            z = z.add(&linear(&f, q("ffn.fc2.w"), q("ffn.fc2.b"))).unwrap();
            prev = Some(scores);
        }
        last = prev;
    }
    let pooled = ops::mean_rows(&z).unwrap().reshape(&[1, z.shape()[1]]).unwrap();
    let normed = ln(&pooled, p(m, "head.ln.g"), p(m, "head.ln.b"));
    linear(&normed, p(m, "head.w"), p(m, "head.b")).reshape(&[cfg.num_classes]).unwrap()
}

#[test]
fn table1_presets() {
    let expect = [
        ("lavit-t", [2, 2, 2, 2], [0, 0, 2, 2]),
        ("lavit-s", [3, 4, 6, 3], [0, 0, 3, 2]),
        ("lavit-b", [3, 3, 18, 3], [0, 2, 4, 3]),
    ];
    for (name, blocks, n_la) in expect {
        let c = ModelConfig::preset(name).unwrap();
        c.validate().unwrap();
        assert_eq!(c.stages.iter().map(|s| s.channels).collect::<Vec<_>>(), [64, 128, 320, 512]);
        assert_eq!(c.stages.iter().map(|s| s.heads).collect::<Vec<_>>(), [1, 2, 5, 8]);
        assert_eq!(c.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(), blocks);
        assert_eq!(c.stages.iter().map(|s| s.n_la).collect::<Vec<_>>(), n_la);
    }
}

#[test]
fn n_la_marks_the_first_la_layer() {
    let s = StageConfig { channels: 8, blocks: 5, heads: 2, n_la: 3 };
    let kinds: Vec<LayerKind> = (0..5).map(|l| s.kind(l)).collect();
    assert_eq!(kinds, [LayerKind::Va, LayerKind::Va, LayerKind::La, LayerKind::La, LayerKind::La]);
    let all_va = StageConfig { n_la: 0, ..s.clone() };
    assert_eq!(all_va.la_layers(), 0);

    let mut cfg = small();
    cfg.stages[1].n_la = 1;
    let e = LaViTModel::build(&cfg, 0).unwrap_err().to_string();
    assert!(e.contains("n_la = 1"), "{e}");
    cfg.stages[1].n_la = 4;
    assert!(cfg.validate().is_err());
}

#[test]
fn transform_pairs_follow_the_stage_layout() {
    let cfg = ModelConfig::preset("toy").unwrap();
    let m = LaViTModel::build(&cfg, 0).unwrap();
    let count = |suffix: &str| m.params.iter().filter(|(n, _)| n.ends_with(suffix)).count();
    assert_eq!((count("theta.w"), count("psi.w")), (1, 1));
    assert_eq!(m.transform_pairs(), 1);
    for name in ["lavit-t", "lavit-s", "lavit-b", "toy-deep", "toy-deep-va"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let expected: usize = cfg.stages.iter().map(|s| if s.n_la > 0 { s.blocks + 1 - s.n_la } else { 0 }).sum();
        assert_eq!(LaViTModel::build(&cfg, 0).unwrap().transform_pairs(), expected, "{name}");
        for (i, s) in cfg.stages.iter().enumerate() {
            let n = cfg.tokens(i);
            let la = LaViTModel::build(&cfg, 0).unwrap();
            for l in 0..s.blocks {
                if let Some(t) = la.params.get(&format!("s{i}.l{l}.attn.theta.w")) {
                    assert_eq!(t.shape(), &[n, n]);
                }
            }
        }
    }
}

#[test]
fn initialization_is_deterministic_and_documented() {
    let cfg = small();
    let (a, b) = (LaViTModel::build(&cfg, 9).unwrap(), LaViTModel::build(&cfg, 9).unwrap());
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, LaViTModel::build(&cfg, 10).unwrap().params);
    assert!(p(&a, "s0.l0.attn.q.w").data().iter().all(|v| v.abs() <= 2.0 * 0.02));
    assert!(p(&a, "s0.l0.attn.q.b").data().iter().all(|&v| v == 0.0));
    assert!(p(&a, "s1.bridge.ls").data().iter().all(|&v| v == 0.1));
    let theta = p(&a, "s1.l1.attn.theta.w");
    let off = theta.add(&Tensor::eye(theta.shape()[0]).scale(-1.0)).unwrap();
    assert!(off.data().iter().all(|v| v.abs() < 0.06));
}

#[test]
fn patch_embed_examples() {
    let img = SeededRng::new(1).uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0);
    let out = patch_embed(&img, &Tensor::ones(&[16, 3]), &Tensor::zeros(&[3]), 4).unwrap();
    assert_eq!(out.shape(), &[1, 4, 3]);

    let c = Tensor::full(&[1, 2, 8, 8], 0.6);
    let avg = Tensor::full(&[2 * 16, 1], 1.0 / 32.0);
    let out = patch_embed(&c, &avg, &Tensor::zeros(&[1]), 4).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
    assert!(patch_embed(&c, &avg, &Tensor::zeros(&[1]), 3).is_err());
}

#[test]
fn patch_embed_matches_im2col() {
    let (c, hgt, wid, pch, d) = (3, 8, 12, 4, 5);
    let img = SeededRng::new(2).uniform_tensor(&[2, c, hgt, wid], -1.0, 1.0);
    let w = SeededRng::new(3).normal_tensor(&[c * pch * pch, d], 1.0);
    let b = SeededRng::new(4).normal_tensor(&[d], 1.0);
    let out = patch_embed(&img, &w, &b, pch).unwrap();
    for bi in 0..2 {
        for gi in 0..hgt / pch {
            for gj in 0..wid / pch {
                let tok = gi * (wid / pch) + gj;
                for o in 0..d {
                    let mut s = b.data()[o];
                    for ch in 0..c {
                        for u in 0..pch {
                            for v in 0..pch {
                                let f = (ch * pch + u) * pch + v;
                                s += w.get(&[f, o]) * img.get(&[bi, ch, gi * pch + u, gj * pch + v]);
                            }
                        }
                    }
                    assert!((out.get(&[bi, tok, o]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn forward_matches_straight_line_composition() {
    for cfg in [small(), ModelConfig::preset("toy").unwrap()] {
        let m = perturbed(&cfg, 5);
        let x = images(&cfg, 2, 6);
        let (logits, _) = m.forward(&x, false).unwrap();
        assert_eq!(logits.shape(), &[2, cfg.num_classes]);
        for b in 0..2 {
            let want = oracle(&m, &x.slice0(b), false);
            assert!(logits.slice0(b).max_abs_diff(&want) < 1e-12, "{:?} vs {:?}", logits.slice0(b), want);
        }
    }
}

fn identity_transforms(m: &mut LaViTModel) {
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = m.params.get_mut(&name).unwrap();
        if name.ends_with("theta.w") || name.ends_with("psi.w") {
            *t = Tensor::eye(t.shape()[0]);
        } else if name.ends_with("theta.b") || name.ends_with("psi.b") || name.ends_with(".ls") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

#[test]
fn identity_transforms_reuse_attention() {
    for cfg in [small(), ModelConfig::preset("toy").unwrap(), ModelConfig::preset("toy-deep").unwrap()] {
        let mut m = perturbed(&cfg, 7);
        identity_transforms(&mut m);
        let x = images(&cfg, 2, 8);
        let (logits, _) = m.forward(&x, false).unwrap();
        for b in 0..2 {
            assert!(logits.slice0(b).max_abs_diff(&oracle(&m, &x.slice0(b), true)) < 1e-10);
        }
    }
}

/// Copies every parameter the target layout shares by name.
fn transplant(from: &LaViTModel, cfg: &ModelConfig) -> LaViTModel {
    let layout = LaViTModel::build(cfg, 0).unwrap();
    let mut store = ParameterStore::new();
    for (name, _) in layout.params.iter() {
        store.insert(name, from.params.get(name).unwrap().clone()).unwrap();
    }
    LaViTModel::from_parts(cfg, store).unwrap()
}

#[test]
fn zero_layerscale_equals_removed_bridge() {
    for cfg in [small(), ModelConfig::preset("toy").unwrap()] {
        let mut m = perturbed(&cfg, 11);
        for (name, t) in m.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
            if name.ends_with(".ls") {
                *m.params.get_mut(&name).unwrap() = Tensor::zeros(&t);
            }
        }
        let mut plain_cfg = cfg.clone();
        plain_cfg.flags.attention_residual = false;
        let plain = transplant(&m, &plain_cfg);
        assert!(plain.params.len() < m.params.len());
        let x = images(&cfg, 3, 12);
        let (a, _) = m.forward(&x, false).unwrap();
        let (b, _) = plain.forward(&x, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn attention_shapes_follow_token_counts() {
    for name in ModelConfig::PRESETS {
        let cfg = ModelConfig::preset(name).unwrap();
        for m in 1..cfg.stages.len() {
            assert_eq!(cfg.tokens(m) * 4, cfg.tokens(m - 1), "{name}");
            assert_eq!(cfg.bridge_rate(m), 4);
        }
    }
    let cfg = small();
    let m = LaViTModel::build(&cfg, 1).unwrap();
    let (_, diags) = m.forward(&images(&cfg, 1, 2), true).unwrap();
    for l in &diags.unwrap()[0].layers {
        let (h, n) = (cfg.stages[l.stage].heads, cfg.tokens(l.stage));
        assert_eq!(l.scores.shape(), &[h, n, n]);
        assert_eq!(l.probs.shape(), &[h, n, n]);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::preset("toy").unwrap();
    let x = images(&cfg, 2, 3);
    let a = LaViTModel::build(&cfg, 4).unwrap().forward(&x, false).unwrap().0;
    let b = LaViTModel::build(&cfg, 4).unwrap().forward(&x, false).unwrap().0;
    assert_eq!(a.data(), b.data());
}

#[test]
fn forward_rejects_bad_geometry_and_large_inputs() {
    let cfg = ModelConfig::preset("toy").unwrap();
    let m = LaViTModel::build(&cfg, 0).unwrap();
    let e = m.forward(&Tensor::zeros(&[1, 3, 16, 16]), false).unwrap_err().to_string();
    assert!(e.contains("[3, 16, 16]"), "{e}");
    let big = LaViTModel::build(&ModelConfig::preset("lavit-t").unwrap(), 0).unwrap();
    let e = big.forward(&Tensor::zeros(&[1, 3, 224, 224]), false).unwrap_err().to_string();
    assert!(e.contains("allow_large"), "{e}");
}

#[test]
fn class_token_mode_runs() {
    let mut cfg = small();
    cfg.flags.pooling = Pooling::ClsToken;
    let m = perturbed(&cfg, 3);
    assert_eq!(cfg.attention_side(1), cfg.tokens(1) + 1);
    let (logits, diags) = m.forward(&images(&cfg, 2, 4), true).unwrap();
    assert_eq!(logits.shape(), &[2, cfg.num_classes]);
    assert!(logits.is_finite());
    let last = diags.unwrap()[0].layers.last().unwrap().probs.clone();
    assert_eq!(last.shape()[1], cfg.tokens(1) + 1);
}

#[test]
fn param_count_matches_allocation() {
    let mut variants = vec![small(), ModelConfig::preset("toy").unwrap(), ModelConfig::preset("toy-deep").unwrap()];
    let mut v = small();
    v.flags.psi_theta_bias = false;
    variants.push(v.clone());
    v.flags.pooling = Pooling::ClsToken;
    variants.push(v.clone());
    v.flags.residual_norm_affine = true;
    variants.push(v.clone());
    v.flags.attention_residual = false;
    variants.push(v);
    for cfg in variants {
        let m = LaViTModel::build(&cfg, 0).unwrap();
        assert_eq!(param_count(&cfg), m.params.scalar_count());
    }
    for name in ["lavit-t", "lavit-s", "lavit-b"] {
        let cfg = ModelConfig::preset(name).unwrap();
        assert_eq!(param_count(&cfg), LaViTModel::build(&cfg, 0).unwrap().params.scalar_count());
    }
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let cfg = small();
    assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    v["stages"][0]["window"] = 3.into();
    let e = ModelConfig::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(e.contains("window"), "{e}");
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    v["flags"]["dropout"] = 0.1.into();
    assert!(ModelConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lavt");
    let m = perturbed(&small(), 21);
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let x = images(&m.config, 1, 22);
    assert_eq!(m.forward(&x, false).unwrap().0.data(), back.forward(&x, false).unwrap().0.data());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lavt");
    checkpoint::save(&LaViTModel::build(&small(), 0).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"PK\x03\x04");
    std::fs::write(&path, &bad).unwrap();
    let e = checkpoint::load(&path).unwrap_err().to_string();
    assert!(e.contains("magic"), "{e}");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    let e = checkpoint::load(&path).unwrap_err().to_string();
    assert!(e.contains("version 7"), "{e}");

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&path).is_err());

    let mut bad = bytes.clone();
    bad.push(0);
    std::fs::write(&path, &bad).unwrap();
    assert!(checkpoint::load(&path).unwrap_err().to_string().contains("trailing"));

    assert!(checkpoint::load(dir.path().join("missing.lavt")).unwrap_err().to_string().contains("cannot open"));
}

#[test]
fn from_parts_checks_layout() {
    let cfg = small();
    let m = LaViTModel::build(&cfg, 0).unwrap();
    let mut other = ModelConfig::preset("toy").unwrap();
    other.image_size = cfg.image_size;
    assert!(LaViTModel::from_parts(&other, m.params.clone()).is_err());
}

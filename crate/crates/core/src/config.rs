//! Model configuration, validation and presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DiagSign, DpOptions, OffDiagSum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSize {
    Square(usize),
    Rect([usize; 2]),
}

impl ImageSize {
    pub fn hw(self) -> (usize, usize) {
        match self {
            ImageSize::Square(s) => (s, s),
            ImageSize::Rect([h, w]) => (h, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    /// 1-based index of the first less-attention layer; 0 keeps the stage all vanilla.
    pub n_la: usize,
}

impl StageConfig {
    pub fn va_layers(&self) -> usize {
        if self.n_la == 0 {
            self.blocks
        } else {
            self.n_la - 1
        }
    }

    pub fn la_layers(&self) -> usize {
        self.blocks - self.va_layers()
    }

    pub fn kind(&self, layer: usize) -> LayerKind {
        if layer < self.va_layers() {
            LayerKind::Va
        } else {
            LayerKind::La
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayerKind {
    Va,
    La,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpTarget {
    #[default]
    PreSoftmax,
    PostSoftmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average over the final-stage tokens.
    #[default]
    Mean,
    /// Learnable token appended at the last stage only.
    ClsToken,
}

fn yes() -> bool {
    true
}

fn default_layerscale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFlags {
    #[serde(default = "yes")]
    pub psi_theta_bias: bool,
    #[serde(default)]
    pub dp_sign: DiagSign,
    #[serde(default)]
    pub dp_off_diag: OffDiagSum,
    #[serde(default)]
    pub dp_target: DpTarget,
    #[serde(default = "default_layerscale")]
    pub layerscale_init: f64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "yes")]
    pub attention_residual: bool,
    #[serde(default)]
    pub residual_norm_affine: bool,
    /// Permits forward passes on geometries with more than [`MAX_TOKENS_DEFAULT`] first-stage tokens.
    #[serde(default)]
    pub allow_large: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            psi_theta_bias: true,
            dp_sign: DiagSign::AsPrinted,
            dp_off_diag: OffDiagSum::Row,
            dp_target: DpTarget::PreSoftmax,
            layerscale_init: default_layerscale(),
            pooling: Pooling::Mean,
            attention_residual: true,
            residual_norm_affine: false,
            allow_large: false,
        }
    }
}

impl ModelFlags {
    pub fn dp_options(&self) -> DpOptions {
        DpOptions { diag_sign: self.dp_sign, off_diag: self.dp_off_diag }
    }
}

/// First-stage token count above which forward passes need `allow_large`.
pub const MAX_TOKENS_DEFAULT: usize = 1024;

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub flags: ModelFlags,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, patch_size and mlp_ratio must be positive".into());
        }
        let (h, w) = self.image_size.hw();
        let unit = self.patch_size << (self.stages.len() - 1);
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return bad(format!(
                "image {h}x{w} must be divisible by patch_size * 2^(stages-1) = {unit}"
            ));
        }
        for (m, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.heads == 0 {
                return bad(format!("stage {m}: channels, blocks and heads must be positive"));
            }
            if s.channels % s.heads != 0 {
                return bad(format!("stage {m}: channels {} not divisible by heads {}", s.channels, s.heads));
            }
            if s.n_la > s.blocks {
                return bad(format!("stage {m}: n_la {} exceeds blocks {}", s.n_la, s.blocks));
            }
            if s.n_la == 1 {
                return bad(format!(
                    "stage {m}: n_la = 1 would start less-attention before any vanilla layer has produced scores"
                ));
            }
        }
        if !self.flags.layerscale_init.is_finite() {
            return bad("layerscale_init must be finite".into());
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` of stage `m` (0-based).
    pub fn grid(&self, m: usize) -> (usize, usize) {
        let (h, w) = self.image_size.hw();
        let f = self.patch_size << m;
        (h / f, w / f)
    }

    /// Spatial tokens at stage `m`, excluding any class token.
    pub fn tokens(&self, m: usize) -> usize {
        let (a, b) = self.grid(m);
        a * b
    }

    /// Side of the attention matrices at stage `m`, including a class token if present.
    pub fn attention_side(&self, m: usize) -> usize {
        let extra = usize::from(self.flags.pooling == Pooling::ClsToken && m + 1 == self.stages.len());
        self.tokens(m) + extra
    }

    /// Rate of the attention-downsampling convolution into stage `m >= 1`.
    pub fn bridge_rate(&self, m: usize) -> usize {
        self.tokens(m - 1) / self.tokens(m)
    }

    pub fn hidden(&self, m: usize) -> usize {
        self.mlp_ratio * self.stages[m].channels
    }

    pub fn la_layer_count(&self) -> usize {
        self.stages.iter().map(StageConfig::la_layers).sum()
    }

    pub fn preset(name: &str) -> Option<ModelConfig> {
        let table1 = |blocks: [usize; 4], n_la: [usize; 4]| {
            let channels = [64, 128, 320, 512];
            let heads = [1, 2, 5, 8];
            ModelConfig {
                image_size: ImageSize::Square(224),
                in_channels: 3,
                patch_size: 4,
                num_classes: 1000,
                mlp_ratio: 4,
                stages: (0..4)
                    .map(|i| StageConfig { channels: channels[i], blocks: blocks[i], heads: heads[i], n_la: n_la[i] })
                    .collect(),
                flags: ModelFlags::default(),
            }
        };
        let cfg = match name {
            "lavit-t" => table1([2, 2, 2, 2], [0, 0, 2, 2]),
            "lavit-s" => table1([3, 4, 6, 3], [0, 0, 3, 2]),
            "lavit-b" => table1([3, 3, 18, 3], [0, 2, 4, 3]),
            "toy" => ModelConfig {
                image_size: ImageSize::Square(32),
                in_channels: 3,
                patch_size: 4,
                num_classes: 4,
                mlp_ratio: 2,
                stages: vec![
                    StageConfig { channels: 16, blocks: 1, heads: 2, n_la: 0 },
                    StageConfig { channels: 32, blocks: 2, heads: 2, n_la: 2 },
                ],
                flags: ModelFlags::default(),
            },
            "toy-deep" | "toy-deep-va" => ModelConfig {
                image_size: ImageSize::Square(16),
                in_channels: 3,
                patch_size: 2,
                num_classes: 4,
                mlp_ratio: 2,
                stages: vec![
                    StageConfig { channels: 8, blocks: 1, heads: 1, n_la: 0 },
                    StageConfig {
                        channels: 16,
                        blocks: 11,
                        heads: 2,
                        n_la: if name == "toy-deep" { 3 } else { 0 },
                    },
                ],
                flags: ModelFlags::default(),
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub const PRESETS: &'static [&'static str] = &["lavit-t", "lavit-s", "lavit-b", "toy", "toy-deep", "toy-deep-va"];

    /// Same architecture evaluated at a different input resolution.
    pub fn with_image_size(&self, size: usize) -> ModelConfig {
        ModelConfig { image_size: ImageSize::Square(size), ..self.clone() }
    }
}

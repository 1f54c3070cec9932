//! Model and training configuration.
//!
//! Configs live in TOML files with a `[model]` table (plus `[model.large]`
//! and `[model.small]` branch tables) and an optional `[train]` table. Every
//! CLI flag overrides its config key. The same TOML text of the model table
//! is embedded in checkpoint headers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionScheme;

/// Which patch tokenizer a branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Linear,
    /// Three convolutional layers whose strides multiply to the patch size.
    Conv3,
}

/// One layer of the convolutional stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStemLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

/// Hyperparameters of one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    /// Patch size in pixels.
    pub patch_size: usize,
    /// Embedding width C.
    pub embed_dim: usize,
    /// Regular encoder blocks run per multi-scale encoder.
    pub blocks_per_encoder: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// FFN hidden width multiplier.
    pub ffn_ratio: usize,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    /// Input side in pixels for this branch; defaults to the model's base
    /// side. Images are bilinearly resized when the two differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_side: Option<usize>,
    /// Explicit conv-stem shape; defaults to a stock stem for the patch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_stem: Option<Vec<ConvStemLayer>>,
}

impl BranchConfig {
    pub fn side(&self, base_input_side: usize) -> usize {
        self.input_side.unwrap_or(base_input_side)
    }
}

/// Identifies a branch where both share code paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Large,
    Small,
}

/// Full model shape: two branches, the multi-scale encoder layout, and the
/// fusion scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side of images the model accepts.
    pub base_input_side: usize,
    /// K: number of multi-scale encoders.
    pub encoders: usize,
    /// L: fusion passes at the end of each encoder.
    pub fusion_depth: usize,
    #[serde(default)]
    pub fusion: FusionScheme,
    #[serde(default)]
    pub drop_path: f64,
    /// Replace learned CLS tokens by the patch-token mean.
    #[serde(default)]
    pub no_cls: bool,
    pub large: BranchConfig,
    pub small: BranchConfig,
}

impl ModelConfig {
    pub fn branch(&self, which: Branch) -> &BranchConfig {
        match which {
            Branch::Large => &self.large,
            Branch::Small => &self.small,
        }
    }

    pub fn branch_side(&self, which: Branch) -> usize {
        self.branch(which).side(self.base_input_side)
    }

    /// Patch grid of a branch: `side/P` in each axis.
    pub fn grid(&self, which: Branch) -> (usize, usize) {
        let b = self.branch(which);
        let g = self.branch_side(which) / b.patch_size;
        (g, g)
    }

    /// Number of patch tokens of a branch.
    pub fn patch_tokens(&self, which: Branch) -> usize {
        let (h, w) = self.grid(which);
        h * w
    }

    /// Rows the CLS slot occupies in position embeddings: 0 in the no-CLS
    /// variant, 1 otherwise.
    pub fn cls_rows(&self) -> usize {
        if self.no_cls {
            0
        } else {
            1
        }
    }

    /// Fusion passes actually run per encoder (0 when fusion is disabled).
    pub fn effective_fusion_depth(&self) -> usize {
        if self.fusion == FusionScheme::None {
            0
        } else {
            self.fusion_depth
        }
    }

    /// Resolved conv stem of a branch, if it uses one.
    pub fn conv_stem(&self, which: Branch) -> Result<Option<Vec<ConvStemLayer>>> {
        let b = self.branch(which);
        if b.tokenizer != TokenizerKind::Conv3 {
            return Ok(None);
        }
        match &b.conv_stem {
            Some(layers) => Ok(Some(layers.clone())),
            None => default_conv_stem(b.patch_size, b.embed_dim)
                .map(Some)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no stock conv stem for patch size {}; set conv_stem explicitly",
                        b.patch_size
                    ))
                }),
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 {
            problems.push("num_classes must be at least 1".to_string());
        }
        if self.encoders == 0 {
            problems.push("encoders (K) must be at least 1".to_string());
        }
        if self.fusion != FusionScheme::None && self.fusion_depth == 0 {
            problems.push("fusion_depth (L) must be at least 1 when fusion is enabled".to_string());
        }
        if self.small.patch_size >= self.large.patch_size {
            problems.push(format!(
                "small patch size ({}) must be finer than large ({})",
                self.small.patch_size, self.large.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            problems.push(format!(
                "drop_path must be in [0, 1), got {}",
                self.drop_path
            ));
        }
        for (name, which) in [("large", Branch::Large), ("small", Branch::Small)] {
            let b = self.branch(which);
            let side = self.branch_side(which);
            if b.patch_size == 0 {
                problems.push(format!("{name}: patch_size must be positive"));
            } else if side % b.patch_size != 0 {
                problems.push(format!(
                    "{name}: input side {side} not divisible by patch size {}",
                    b.patch_size
                ));
            }
            if b.heads == 0 || b.embed_dim == 0 || b.embed_dim % b.heads.max(1) != 0 {
                problems.push(format!(
                    "{name}: embed_dim {} must be a positive multiple of heads {}",
                    b.embed_dim, b.heads
                ));
            }
            if b.blocks_per_encoder == 0 {
                problems.push(format!("{name}: blocks_per_encoder must be at least 1"));
            }
            if b.ffn_ratio == 0 {
                problems.push(format!("{name}: ffn_ratio must be at least 1"));
            }
            if b.tokenizer == TokenizerKind::Conv3 && b.patch_size != 0 {
                match self.conv_stem(which) {
                    Err(e) => problems.push(format!("{name}: {e}")),
                    Ok(Some(layers)) => {
                        let stride: usize = layers.iter().map(|l| l.stride).product();
                        if stride != b.patch_size {
                            problems.push(format!(
                                "{name}: conv stem strides multiply to {stride}, patch size is {}",
                                b.patch_size
                            ));
                        } else if side % b.patch_size == 0 {
                            let mut s = side;
                            for l in &layers {
                                if s + 2 * l.padding < l.kernel {
                                    s = 0;
                                    break;
                                }
                                s = (s + 2 * l.padding - l.kernel) / l.stride + 1;
                            }
                            if s != side / b.patch_size {
                                problems.push(format!(
                                    "{name}: conv stem maps side {side} to grid {s}, expected {}",
                                    side / b.patch_size
                                ));
                            }
                        }
                        if layers.last().map(|l| l.channels) != Some(b.embed_dim) {
                            problems.push(format!(
                                "{name}: conv stem must end at embed_dim {} channels",
                                b.embed_dim
                            ));
                        }
                    }
                    Ok(None) => {}
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }
}

/// Stock three-layer stems per patch size, ramping channels to `embed_dim`.
pub fn default_conv_stem(patch_size: usize, embed_dim: usize) -> Option<Vec<ConvStemLayer>> {
    let shapes: &[(usize, usize, usize)] = match patch_size {
        32 => &[(7, 4, 2), (4, 4, 0), (3, 2, 1)],
        16 => &[(7, 4, 2), (3, 2, 1), (3, 2, 1)],
        12 => &[(7, 4, 2), (3, 3, 1), (3, 1, 1)],
        8 => &[(7, 4, 2), (3, 2, 1), (3, 1, 1)],
        4 => &[(3, 2, 1), (3, 2, 1), (3, 1, 1)],
        2 => &[(3, 2, 1), (3, 1, 1), (3, 1, 1)],
        _ => return None,
    };
    let channels = [(embed_dim / 4).max(1), (embed_dim / 2).max(1), embed_dim];
    Some(
        shapes
            .iter()
            .zip(channels)
            .map(|(&(kernel, stride, padding), channels)| ConvStemLayer {
                kernel,
                stride,
                padding,
                channels,
            })
            .collect(),
    )
}

// ───────────────────────────── training config ─────────────────────────────

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded class-conditional blob images, generated in memory.
    Synth {
        n: usize,
        classes: usize,
        side: usize,
        seed: u64,
    },
    /// Directory of CIFAR-10 binary batch files.
    Cifar10 {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
        /// Optional per-channel normalization applied after the [0,1] scale.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<[f64; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<[f64; 3]>,
    },
}

/// Output locations for training artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint: "out/last.crvt".into(),
            best_checkpoint: "out/best.crvt".into(),
            metrics: "out/metrics.csv".into(),
        }
    }
}

/// Which optimizer drives training. SGD with momentum is the default;
/// the adaptive option helps small models converge within tight epoch
/// budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Optimizer, schedule, and data settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the model's drop-path rate during training when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_path: Option<f64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.warmup_epochs >= self.epochs {
            problems.push(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1], got {}", self.momentum));
        }
        if let Some(p) = self.drop_path {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("drop_path must be in [0, 1), got {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }
}

/// A whole config file: the model table plus an optional train table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Serializes a model config as the TOML text embedded in checkpoints.
pub fn model_config_to_toml(config: &ModelConfig) -> String {
    toml::to_string(config).expect("model config serializes")
}

pub fn model_config_from_toml(text: &str) -> Result<ModelConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("embedded config: {e}")))
}

// ──────────────────────────────── presets ────────────────────────────────

fn branch(
    patch_size: usize,
    embed_dim: usize,
    blocks_per_encoder: usize,
    heads: usize,
    input_side: Option<usize>,
) -> BranchConfig {
    BranchConfig {
        patch_size,
        embed_dim,
        blocks_per_encoder,
        heads,
        ffn_ratio: 4,
        tokenizer: TokenizerKind::Linear,
        input_side,
        conv_stem: None,
    }
}

/// Named model presets. Sizes follow the usual tiny/small/base ViT widths
/// for the large branch; the small branch runs half the width, one block per
/// encoder, and 12-pixel patches on a 240-pixel input (so its token count is
/// about twice the large branch's). All presets are plain data and every
/// field can be overridden in a config file.
pub fn preset(name: &str, num_classes: usize) -> Option<ModelConfig> {
    let tsb = |cl: usize, hl: usize| ModelConfig {
        num_classes,
        base_input_side: 224,
        encoders: 3,
        fusion_depth: 1,
        fusion: FusionScheme::CrossAttention,
        drop_path: 0.0,
        no_cls: false,
        large: branch(16, cl, 4, hl, None),
        small: branch(12, cl / 2, 1, hl, Some(240)),
    };
    match name {
        "crossvit-ti" => Some(tsb(192, 3)),
        "crossvit-s" => Some(tsb(384, 6)),
        "crossvit-b" => Some(tsb(768, 12)),
        "micro" => Some(micro_overfit(num_classes)),
        "micro-gradcheck" => Some(micro_gradcheck(num_classes)),
        _ => None,
    }
}

/// Desk-scale model that can overfit a few dozen 32×32 images in seconds.
pub fn micro_overfit(num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        base_input_side: 32,
        encoders: 2,
        fusion_depth: 1,
        fusion: FusionScheme::CrossAttention,
        drop_path: 0.0,
        no_cls: false,
        large: branch(8, 64, 2, 4, None),
        small: branch(4, 32, 1, 2, None),
    }
}

/// Tiny model for finite-difference gradient checking: 8×8 inputs, width 16.
pub fn micro_gradcheck(num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        base_input_side: 8,
        encoders: 1,
        fusion_depth: 1,
        fusion: FusionScheme::CrossAttention,
        drop_path: 0.0,
        no_cls: false,
        large: branch(4, 16, 1, 2, None),
        small: branch(2, 16, 1, 2, None),
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "crossvit-ti",
    "crossvit-s",
    "crossvit-b",
    "micro",
    "micro-gradcheck",
];

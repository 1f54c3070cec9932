//! Model assembly: two branches, K multi-scale encoders, fusion passes, and
//! dual classification heads whose logits are averaged for prediction.
//!
//! [`ModelParams`] is generic over its storage: `ModelParams<Tensor>` (the
//! alias [`Parameters`]) holds the weights, and `ModelParams<Var>` is one
//! forward evaluation's tape binding of them. `map` converts between the
//! two and `visit` walks every tensor with its canonical name. The traversal
//! order — large branch, small branch, fusion, heads — is fixed and defines
//! the checkpoint layout.

mod checkpoint;
mod init;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    encoder_block, patch_embed_conv, patch_embed_linear, resize_pos_embed, AttentionParams,
    ConvLayer, EmbeddingParams, EncoderParams, FfnParams, LayerNormParams, TokenSeq, Tokenizer,
    LN_EPS,
};
use crate::config::{Branch, ModelConfig, TokenizerKind};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, AllAttentionParams, ClassTokenParams, CrossAttnDirection, CrossAttnParams, FusionParams,
    FusionScheme, PairwiseParams, Projection, ProjectionPair,
};
use crate::tensor::resize::resize_image_bilinear;
use crate::tensor::{Tape, Tensor, Var};

/// One branch's weights: embedding plus `K · blocks_per_encoder` encoder
/// blocks, stored encoder-major.
#[derive(Clone, Debug)]
pub struct BranchParams<T> {
    pub embed: EmbeddingParams<T>,
    pub blocks: Vec<EncoderParams<T>>,
}

/// Classification head: layer norm over the final CLS token, then a linear
/// map to the class logits.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub ln: LayerNormParams<T>,
    pub weight: T,
    pub bias: T,
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub large: BranchParams<T>,
    pub small: BranchParams<T>,
    /// Fusion weights, one entry per (encoder, pass), encoder-major. Empty
    /// when fusion is disabled.
    pub fusion: Vec<FusionParams<T>>,
    pub head_large: HeadParams<T>,
    pub head_small: HeadParams<T>,
    /// Fusion passes per encoder the `fusion` vector was laid out for.
    pub fusion_depth: usize,
    /// Blocks per encoder, used to name blocks `encK.blkM`.
    pub large_blocks_per_encoder: usize,
    pub small_blocks_per_encoder: usize,
}

/// The model's weights.
pub type Parameters = ModelParams<Tensor>;

impl<T> BranchParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BranchParams<U> {
        BranchParams {
            embed: self.embed.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    fn visit<'a>(&'a self, name: &str, per_encoder: usize, f: &mut dyn FnMut(String, &'a T)) {
        self.embed.visit(&format!("{name}.embed"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            let (k, m) = (i / per_encoder, i % per_encoder);
            block.visit(&format!("{name}.enc{k}.blk{m}"), f);
        }
    }
}

impl<T> HeadParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            ln: self.ln.map(f),
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.ln.visit(&format!("{path}.ln"), f);
        f(format!("{path}.weight"), &self.weight);
        f(format!("{path}.bias"), &self.bias);
    }
}

impl<T> ModelParams<T> {
    /// Rebuilds the tree with every tensor transformed. Traversal order is
    /// identical to [`ModelParams::visit`].
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            large: self.large.map(f),
            small: self.small.map(f),
            fusion: self.fusion.iter().map(|p| p.map(f)).collect(),
            head_large: self.head_large.map(f),
            head_small: self.head_small.map(f),
            fusion_depth: self.fusion_depth,
            large_blocks_per_encoder: self.large_blocks_per_encoder,
            small_blocks_per_encoder: self.small_blocks_per_encoder,
        }
    }

    /// Walks every tensor with its canonical name, branch-major, then depth,
    /// then fusion, then heads. This order defines the checkpoint layout.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.large.visit("large", self.large_blocks_per_encoder, f);
        self.small.visit("small", self.small_blocks_per_encoder, f);
        for (i, fu) in self.fusion.iter().enumerate() {
            let depth = self.fusion_depth.max(1);
            let (k, p) = (i / depth, i % depth);
            fu.visit(&format!("fuse{k}.pass{p}"), f);
        }
        self.head_large.visit("head.large", f);
        self.head_small.visit("head.small", f);
    }

    /// Named tensors in traversal order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }
}

impl Parameters {
    /// Total number of scalar elements across all tensors.
    pub fn element_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.numel() as u64);
        n
    }

    /// True when every tensor is bit-identical to its counterpart.
    pub fn bit_eq(&self, other: &Parameters) -> bool {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len()
            && a.iter()
                .zip(b.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

// ─────────────────────────────── building ───────────────────────────────

/// What role a tensor plays, which picks its initializer.
#[derive(Clone, Copy, PartialEq)]
enum ParamKind {
    Weight,
    Bias,
    LnGamma,
    LnBeta,
    Embedding,
}

/// Builds the full parameter tree, delegating tensor creation so the same
/// structure code serves seeded initialization and checkpoint loading.
fn build_with(
    config: &ModelConfig,
    make: &mut impl FnMut(ParamKind, Vec<usize>) -> Tensor,
) -> Result<Parameters> {
    config.validate()?;

    let ln = |make: &mut dyn FnMut(ParamKind, Vec<usize>) -> Tensor, c: usize| LayerNormParams {
        gamma: make(ParamKind::LnGamma, vec![c]),
        beta: make(ParamKind::LnBeta, vec![c]),
    };
    let attn = |make: &mut dyn FnMut(ParamKind, Vec<usize>) -> Tensor, c: usize, heads: usize| {
        AttentionParams {
            wq: make(ParamKind::Weight, vec![c, c]),
            wk: make(ParamKind::Weight, vec![c, c]),
            wv: make(ParamKind::Weight, vec![c, c]),
            wo: make(ParamKind::Weight, vec![c, c]),
            bo: make(ParamKind::Bias, vec![c]),
            heads,
        }
    };
    let pair = |make: &mut dyn FnMut(ParamKind, Vec<usize>) -> Tensor, from: usize, to: usize| {
        ProjectionPair {
            f: if from == to {
                Projection::Identity
            } else {
                Projection::Linear {
                    weight: make(ParamKind::Weight, vec![from, to]),
                    bias: make(ParamKind::Bias, vec![to]),
                }
            },
            g: if from == to {
                Projection::Identity
            } else {
                Projection::Linear {
                    weight: make(ParamKind::Weight, vec![to, from]),
                    bias: make(ParamKind::Bias, vec![from]),
                }
            },
        }
    };

    let mut branch = |which: Branch| -> Result<BranchParams<Tensor>> {
        let b = config.branch(which);
        let c = b.embed_dim;
        let n = config.patch_tokens(which);
        let tokenizer = match b.tokenizer {
            TokenizerKind::Linear => Tokenizer::Linear {
                weight: make(ParamKind::Weight, vec![b.patch_size * b.patch_size * 3, c]),
                bias: make(ParamKind::Bias, vec![c]),
            },
            TokenizerKind::Conv3 => {
                let stem = config.conv_stem(which)?.expect("validated conv stem");
                let mut layers = Vec::with_capacity(stem.len());
                let mut c_in = 3;
                for l in stem {
                    layers.push(ConvLayer {
                        weight: make(
                            ParamKind::Weight,
                            vec![l.channels, c_in, l.kernel, l.kernel],
                        ),
                        bias: make(ParamKind::Bias, vec![l.channels]),
                        kernel: l.kernel,
                        stride: l.stride,
                        padding: l.padding,
                    });
                    c_in = l.channels;
                }
                Tokenizer::Conv(layers)
            }
        };
        let cls = if config.no_cls {
            None
        } else {
            Some(make(ParamKind::Embedding, vec![1, c]))
        };
        let pos = make(ParamKind::Embedding, vec![config.cls_rows() + n, c]);
        let blocks = (0..config.encoders * b.blocks_per_encoder)
            .map(|_| EncoderParams {
                ln1: ln(make, c),
                attn: attn(make, c, b.heads),
                ln2: ln(make, c),
                ffn: FfnParams {
                    w1: make(ParamKind::Weight, vec![c, b.ffn_ratio * c]),
                    b1: make(ParamKind::Bias, vec![b.ffn_ratio * c]),
                    w2: make(ParamKind::Weight, vec![b.ffn_ratio * c, c]),
                    b2: make(ParamKind::Bias, vec![c]),
                },
            })
            .collect();
        Ok(BranchParams {
            embed: EmbeddingParams {
                tokenizer,
                cls,
                pos,
            },
            blocks,
        })
    };

    let large = branch(Branch::Large)?;
    let small = branch(Branch::Small)?;

    let (cl, cs) = (config.large.embed_dim, config.small.embed_dim);
    let (hl, hs) = (config.large.heads, config.small.heads);
    let shared = cl.max(cs);
    let shared_heads = if cl >= cs { hl } else { hs };
    let passes = config.encoders * config.effective_fusion_depth();
    let fusion = (0..passes)
        .map(|_| match config.fusion {
            FusionScheme::None => FusionParams::None,
            FusionScheme::AllAttention => FusionParams::AllAttention(AllAttentionParams {
                proj_l: pair(make, cl, shared),
                proj_s: pair(make, cs, shared),
                ln: ln(make, shared),
                attn: attn(make, shared, shared_heads),
            }),
            FusionScheme::ClassToken => FusionParams::ClassToken(ClassTokenParams {
                proj_l: pair(make, cl, shared),
                proj_s: pair(make, cs, shared),
            }),
            FusionScheme::Pairwise => FusionParams::Pairwise(PairwiseParams {
                proj_l: pair(make, cl, shared),
                proj_s: pair(make, cs, shared),
            }),
            FusionScheme::CrossAttention => FusionParams::CrossAttention(CrossAttnParams {
                l_from_s: CrossAttnDirection {
                    pair: pair(make, cl, cs),
                    ln: ln(make, cs),
                    attn: attn(make, cs, hs),
                },
                s_from_l: CrossAttnDirection {
                    pair: pair(make, cs, cl),
                    ln: ln(make, cl),
                    attn: attn(make, cl, hl),
                },
            }),
        })
        .collect();

    let head = |make: &mut dyn FnMut(ParamKind, Vec<usize>) -> Tensor, c: usize| HeadParams {
        ln: LayerNormParams {
            gamma: make(ParamKind::LnGamma, vec![c]),
            beta: make(ParamKind::LnBeta, vec![c]),
        },
        weight: make(ParamKind::Weight, vec![c, config.num_classes]),
        bias: make(ParamKind::Bias, vec![config.num_classes]),
    };
    let head_large = head(make, cl);
    let head_small = head(make, cs);

    Ok(ModelParams {
        large,
        small,
        fusion,
        head_large,
        head_small,
        fusion_depth: config.effective_fusion_depth(),
        large_blocks_per_encoder: config.large.blocks_per_encoder,
        small_blocks_per_encoder: config.small.blocks_per_encoder,
    })
}

/// Allocates and initializes all parameters: truncated normal (σ = 0.02)
/// for projections and embeddings, zeros for biases, ones/zeros for layer
/// norms. Deterministic under `seed`.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    let mut init = init::Initializer::new(seed);
    build_with(config, &mut |kind, shape| match kind {
        ParamKind::Weight | ParamKind::Embedding => init.trunc_normal(shape),
        ParamKind::Bias | ParamKind::LnBeta => Tensor::zeros(shape),
        ParamKind::LnGamma => Tensor::filled(shape, 1.0),
    })
}

/// Allocates the parameter tree with zeroed tensors; used as a shape
/// skeleton when loading checkpoints.
pub(crate) fn skeleton(config: &ModelConfig) -> Result<Parameters> {
    build_with(config, &mut |_, shape| Tensor::zeros(shape))
}

// ─────────────────────────────── forward ───────────────────────────────

/// Binds parameters onto a tape for one evaluation. With `trainable` the
/// leaves are tracked and will receive gradients from `backward`.
pub fn bind(tape: &mut Tape, params: &Parameters, trainable: bool) -> ModelParams<Var> {
    params.map(&mut |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            Var::constant(t.clone())
        }
    })
}

/// Logits produced by one forward pass.
pub struct ForwardOutput {
    pub logits_large: Var,
    pub logits_small: Var,
    /// Arithmetic mean of the two branches' logits; the model's prediction.
    pub ensemble: Var,
}

/// Runs the model on one image: per branch — resize to the branch side,
/// tokenize, add CLS and position embeddings; then K rounds of that branch's
/// encoder blocks followed by L fusion passes; finally each branch's CLS
/// goes through its head and the two logit vectors are averaged.
pub fn forward(
    tape: &mut Tape,
    bound: &ModelParams<Var>,
    config: &ModelConfig,
    image: &Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput> {
    let s = config.base_input_side;
    if image.shape() != [3, s, s] {
        return Err(Error::contract(
            "forward",
            format!("expected [3×{s}×{s}] input, got {:?}", image.shape()),
        ));
    }

    let embed_branch = |tape: &mut Tape,
                        which: Branch,
                        params: &BranchParams<Var>|
     -> Result<TokenSeq> {
        let b = config.branch(which);
        let side = config.branch_side(which);
        let resized = resize_image_bilinear(image, side, side)?;
        let img = Var::constant(resized);
        match b.tokenizer {
            TokenizerKind::Linear => patch_embed_linear(tape, &img, &params.embed, b.patch_size),
            TokenizerKind::Conv3 => patch_embed_conv(tape, &img, &params.embed, b.patch_size),
        }
    };

    let mut xl = embed_branch(tape, Branch::Large, &bound.large)?;
    let mut xs = embed_branch(tape, Branch::Small, &bound.small)?;

    let run_blocks = |tape: &mut Tape,
                      seq: &TokenSeq,
                      blocks: &[EncoderParams<Var>],
                      rng: &mut ChaCha8Rng|
     -> Result<TokenSeq> {
        let mut x = seq.full(tape)?;
        for block in blocks {
            x = encoder_block(tape, &x, block, config.drop_path, training, rng)?;
        }
        TokenSeq::from_full(tape, &x, seq.grid)
    };

    let depth = config.effective_fusion_depth();
    let (m, n) = (
        config.large.blocks_per_encoder,
        config.small.blocks_per_encoder,
    );
    for k in 0..config.encoders {
        xl = run_blocks(tape, &xl, &bound.large.blocks[k * m..(k + 1) * m], rng)?;
        xs = run_blocks(tape, &xs, &bound.small.blocks[k * n..(k + 1) * n], rng)?;
        for pass in 0..depth {
            let (zl, zs) = fuse(tape, &xl, &xs, &bound.fusion[k * depth + pass])?;
            xl = zl;
            xs = zs;
        }
    }

    let (logits_large, logits_small, ensemble) =
        predict_heads(tape, &bound.head_large, &bound.head_small, &xl.cls, &xs.cls)?;
    Ok(ForwardOutput {
        logits_large,
        logits_small,
        ensemble,
    })
}

/// Applies each branch's head (layer norm, then linear) to its final CLS
/// token and averages the two logit vectors.
pub fn predict_heads(
    tape: &mut Tape,
    head_large: &HeadParams<Var>,
    head_small: &HeadParams<Var>,
    cls_large: &Var,
    cls_small: &Var,
) -> Result<(Var, Var, Var)> {
    let apply = |tape: &mut Tape, head: &HeadParams<Var>, cls: &Var| -> Result<Var> {
        let normed = tape.layer_norm(cls, &head.ln.gamma, &head.ln.beta, LN_EPS)?;
        let logits = tape.linear(&normed, &head.weight, &head.bias)?;
        let k = logits.shape()[1];
        tape.reshape(&logits, vec![k])
    };
    let logits_l = apply(tape, head_large, cls_large)?;
    let logits_s = apply(tape, head_small, cls_small)?;
    let sum = tape.add(&logits_l, &logits_s)?;
    let ensemble = tape.scale(&sum, 0.5)?;
    Ok((logits_l, logits_s, ensemble))
}

/// Convenience eval-mode forward returning plain logits.
pub fn forward_eval(
    params: &Parameters,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let mut rng = unused_rng();
    let out = forward(&mut tape, &bound, config, image, false, &mut rng)?;
    Ok((
        out.logits_large.value().clone(),
        out.logits_small.value().clone(),
        out.ensemble.value().clone(),
    ))
}

/// Eval mode never draws from its generator; any seed works.
pub(crate) fn unused_rng() -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(0)
}

// ────────────────────────── resolution adaptation ──────────────────────────

/// Rescales the model to a new base input side: each branch's side scales
/// proportionally and its position embeddings are bicubically resampled to
/// the new grid. Every other weight is returned bit-identical.
pub fn adapt_resolution(
    params: &Parameters,
    config: &ModelConfig,
    new_base_side: usize,
) -> Result<(Parameters, ModelConfig)> {
    let old_base = config.base_input_side;
    if new_base_side == old_base {
        return Ok((params.clone(), config.clone()));
    }
    let mut new_config = config.clone();
    new_config.base_input_side = new_base_side;

    let mut adapt_branch =
        |which: Branch, branch_params: &BranchParams<Tensor>| -> Result<BranchParams<Tensor>> {
            let b = config.branch(which);
            let old_side = config.branch_side(which);
            let scaled = old_side * new_base_side;
            if scaled % old_base != 0 {
                return Err(Error::Config(format!(
                    "branch side {old_side} does not scale to an integer at base {new_base_side}"
                )));
            }
            let new_side = scaled / old_base;
            if new_side % b.patch_size != 0 {
                return Err(Error::Config(format!(
                    "scaled side {new_side} not divisible by patch size {}",
                    b.patch_size
                )));
            }
            let old_grid = config.grid(which);
            let g = new_side / b.patch_size;
            let pos = resize_pos_embed(
                &branch_params.embed.pos,
                old_grid,
                (g, g),
                config.cls_rows(),
            )?;
            let mut out = branch_params.clone();
            out.embed.pos = pos;
            match which {
                Branch::Large => new_config.large.input_side = Some(new_side),
                Branch::Small => new_config.small.input_side = Some(new_side),
            }
            Ok(out)
        };

    let large = adapt_branch(Branch::Large, &params.large)?;
    let small = adapt_branch(Branch::Small, &params.small)?;
    let mut out = params.clone();
    out.large = large;
    out.small = small;
    new_config.validate()?;
    Ok((out, new_config))
}

//! ViT building blocks: patch tokenizers, CLS/position embeddings,
//! multi-head self-attention, the feed-forward block, and the pre-LN
//! encoder block
//!
//! ```text
//!     y = x + MSA(LN(x))
//!     x' = y + FFN(LN(y))
//! ```
//!
//! with optional per-sample drop-path on each residual branch during
//! training.
//!
//! Parameter structs are generic over their storage so the same shape can
//! hold plain [`Tensor`]s (the model's weights) or tape-bound [`Var`]s (one
//! forward evaluation).

use crate::error::{Error, Result};
use crate::tensor::resize::resize_token_grid_bicubic;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Epsilon added inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-6;

/// One branch's activation: a CLS row, `N` patch rows of width `C`, and the
/// patch grid those rows came from (`grid.0 · grid.1 == N`).
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub cls: Var,
    pub patch: Var,
    pub grid: (usize, usize),
}

impl TokenSeq {
    pub fn width(&self) -> usize {
        self.patch.shape()[1]
    }

    pub fn num_patches(&self) -> usize {
        self.patch.shape()[0]
    }

    /// `(1+N)×C` matrix with the CLS token as row 0.
    pub fn full(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(&[&self.cls, &self.patch], 0)
    }

    /// Splits a `(1+N)×C` matrix back into CLS and patch rows.
    pub fn from_full(tape: &mut Tape, full: &Var, grid: (usize, usize)) -> Result<TokenSeq> {
        let n = grid.0 * grid.1;
        let cls = tape.slice(full, 0, 0, 1)?;
        let patch = tape.slice(full, 0, 1, n)?;
        Ok(TokenSeq { cls, patch, grid })
    }
}

// ─────────────────────────── parameter structs ───────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

/// Attention projections. `wq`/`wk`/`wv` hold all heads side by side as
/// `C×C` matrices (each head reads its own `C/h` column band) and carry no
/// bias; the output projection `wo`/`bo` does.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub bo: T,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Weights of one pre-LN encoder block.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: T,
    pub bias: T,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Patch tokenizer: a single linear projection of flattened patches, or a
/// three-layer convolutional stem whose strides multiply to the patch size.
#[derive(Clone, Debug)]
pub enum Tokenizer<T> {
    Linear { weight: T, bias: T },
    Conv(Vec<ConvLayer<T>>),
}

/// Embedding parameters for one branch. `cls` is absent in the no-CLS
/// variant, where the patch mean stands in for the class token; `pos` then
/// has `N` rows instead of `1+N` (row 0 is otherwise the CLS slot).
#[derive(Clone, Debug)]
pub struct EmbeddingParams<T> {
    pub tokenizer: Tokenizer<T>,
    pub cls: Option<T>,
    pub pos: T,
}

macro_rules! impl_map_visit {
    ($ty:ident, $self:ident, $f:ident, $path:ident, map: $map:expr, visit: $visit:expr) => {
        impl<T> $ty<T> {
            pub fn map<U>(&$self, $f: &mut impl FnMut(&T) -> U) -> $ty<U> {
                $map
            }
            pub fn visit<'a>(&'a $self, $path: &str, $f: &mut dyn FnMut(String, &'a T)) {
                $visit
            }
        }
    };
}

impl_map_visit!(LayerNormParams, self, f, path,
    map: LayerNormParams { gamma: f(&self.gamma), beta: f(&self.beta) },
    visit: {
        f(format!("{path}.gamma"), &self.gamma);
        f(format!("{path}.beta"), &self.beta);
    }
);

impl_map_visit!(AttentionParams, self, f, path,
    map: AttentionParams {
        wq: f(&self.wq),
        wk: f(&self.wk),
        wv: f(&self.wv),
        wo: f(&self.wo),
        bo: f(&self.bo),
        heads: self.heads,
    },
    visit: {
        f(format!("{path}.wq"), &self.wq);
        f(format!("{path}.wk"), &self.wk);
        f(format!("{path}.wv"), &self.wv);
        f(format!("{path}.wo"), &self.wo);
        f(format!("{path}.bo"), &self.bo);
    }
);

impl_map_visit!(FfnParams, self, f, path,
    map: FfnParams {
        w1: f(&self.w1),
        b1: f(&self.b1),
        w2: f(&self.w2),
        b2: f(&self.b2),
    },
    visit: {
        f(format!("{path}.w1"), &self.w1);
        f(format!("{path}.b1"), &self.b1);
        f(format!("{path}.w2"), &self.w2);
        f(format!("{path}.b2"), &self.b2);
    }
);

impl_map_visit!(EncoderParams, self, f, path,
    map: EncoderParams {
        ln1: self.ln1.map(f),
        attn: self.attn.map(f),
        ln2: self.ln2.map(f),
        ffn: self.ffn.map(f),
    },
    visit: {
        self.ln1.visit(&format!("{path}.ln1"), f);
        self.attn.visit(&format!("{path}.attn"), f);
        self.ln2.visit(&format!("{path}.ln2"), f);
        self.ffn.visit(&format!("{path}.ffn"), f);
    }
);

impl<T> Tokenizer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Tokenizer<U> {
        match self {
            Tokenizer::Linear { weight, bias } => Tokenizer::Linear {
                weight: f(weight),
                bias: f(bias),
            },
            Tokenizer::Conv(layers) => Tokenizer::Conv(
                layers
                    .iter()
                    .map(|l| ConvLayer {
                        weight: f(&l.weight),
                        bias: f(&l.bias),
                        kernel: l.kernel,
                        stride: l.stride,
                        padding: l.padding,
                    })
                    .collect(),
            ),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            Tokenizer::Linear { weight, bias } => {
                f(format!("{path}.weight"), weight);
                f(format!("{path}.bias"), bias);
            }
            Tokenizer::Conv(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    f(format!("{path}.conv{i}.weight"), &l.weight);
                    f(format!("{path}.conv{i}.bias"), &l.bias);
                }
            }
        }
    }
}

impl<T> EmbeddingParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            tokenizer: self.tokenizer.map(f),
            cls: self.cls.as_ref().map(&mut *f),
            pos: f(&self.pos),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.tokenizer.visit(&format!("{path}.tokenizer"), f);
        if let Some(cls) = &self.cls {
            f(format!("{path}.cls"), cls);
        }
        f(format!("{path}.pos"), &self.pos);
    }
}

// ─────────────────────────────── operations ───────────────────────────────

/// Tokenizes an image with a linear projection of flattened patches, adds
/// the CLS token, and adds position embeddings to every row.
pub fn patch_embed_linear(
    tape: &mut Tape,
    image: &Var,
    params: &EmbeddingParams<Var>,
    patch_size: usize,
) -> Result<TokenSeq> {
    let (weight, bias) = match &params.tokenizer {
        Tokenizer::Linear { weight, bias } => (weight, bias),
        Tokenizer::Conv(_) => {
            return Err(Error::contract(
                "patch_embed_linear",
                "tokenizer parameters are convolutional",
            ))
        }
    };
    let s = image.shape();
    let grid = (s[1] / patch_size, s[2] / patch_size);
    let patches = tape.image_to_patches(image, patch_size)?;
    let tokens = tape.linear(&patches, weight, bias)?;
    finish_embedding(tape, tokens, params, grid)
}

/// Tokenizes an image with the three-layer convolutional stem; a GELU
/// follows every layer except the last. The resulting grid must match the
/// linear tokenizer's `side/P` contract.
pub fn patch_embed_conv(
    tape: &mut Tape,
    image: &Var,
    params: &EmbeddingParams<Var>,
    patch_size: usize,
) -> Result<TokenSeq> {
    let layers = match &params.tokenizer {
        Tokenizer::Conv(layers) => layers,
        Tokenizer::Linear { .. } => {
            return Err(Error::contract(
                "patch_embed_conv",
                "tokenizer parameters are linear",
            ))
        }
    };
    let stride_product: usize = layers.iter().map(|l| l.stride).product();
    if stride_product != patch_size {
        return Err(Error::Config(format!(
            "conv stem strides multiply to {stride_product}, patch size is {patch_size}"
        )));
    }
    let s = image.shape();
    if s[1] % patch_size != 0 || s[2] % patch_size != 0 {
        return Err(Error::Config(format!(
            "image side {}x{} not divisible by patch size {patch_size}",
            s[1], s[2]
        )));
    }
    let expected = (s[1] / patch_size, s[2] / patch_size);
    let mut x = image.clone();
    for (i, layer) in layers.iter().enumerate() {
        x = tape.conv2d(&x, &layer.weight, &layer.bias, layer.stride, layer.padding)?;
        if i + 1 < layers.len() {
            x = tape.gelu(&x)?;
        }
    }
    let out = x.shape().to_vec();
    if (out[1], out[2]) != expected {
        return Err(Error::Config(format!(
            "conv stem produced grid {}x{}, expected {}x{}",
            out[1], out[2], expected.0, expected.1
        )));
    }
    // [C×gh×gw] -> [N×C] with rows in grid row-major order
    let c = out[0];
    let n = out[1] * out[2];
    let flat = tape.reshape(&x, vec![c, n])?;
    let tokens = tape.transpose(&flat)?;
    finish_embedding(tape, tokens, params, expected)
}

/// Adds CLS and position embeddings to freshly tokenized patches. In the
/// no-CLS variant the class row is the mean of the position-embedded patch
/// tokens.
fn finish_embedding(
    tape: &mut Tape,
    tokens: Var,
    params: &EmbeddingParams<Var>,
    grid: (usize, usize),
) -> Result<TokenSeq> {
    let n = grid.0 * grid.1;
    match &params.cls {
        Some(cls) => {
            if params.pos.shape()[0] != n + 1 {
                return Err(Error::Config(format!(
                    "position embedding has {} rows, expected {}",
                    params.pos.shape()[0],
                    n + 1
                )));
            }
            let pos_cls = tape.slice(&params.pos, 0, 0, 1)?;
            let pos_patch = tape.slice(&params.pos, 0, 1, n)?;
            let cls = tape.add(cls, &pos_cls)?;
            let patch = tape.add(&tokens, &pos_patch)?;
            Ok(TokenSeq { cls, patch, grid })
        }
        None => {
            if params.pos.shape()[0] != n {
                return Err(Error::Config(format!(
                    "position embedding has {} rows, expected {n}",
                    params.pos.shape()[0]
                )));
            }
            let patch = tape.add(&tokens, &params.pos)?;
            let cls = tape.mean_rows(&patch)?;
            Ok(TokenSeq { cls, patch, grid })
        }
    }
}

/// Multi-head self-attention over a `(1+N)×C` token matrix. Per head:
/// `q = xW_q`, `k = xW_k`, `v = xW_v`, `A = softmax(qkᵀ/√(C/h))` row-wise,
/// output `Av`; heads are concatenated and projected with `(W_o, b_o)`.
pub fn msa(tape: &mut Tape, x: &Var, params: &AttentionParams<Var>) -> Result<Var> {
    msa_with_maps(tape, x, params).map(|(out, _)| out)
}

/// As [`msa`], also returning each head's attention map for inspection.
pub fn msa_with_maps(
    tape: &mut Tape,
    x: &Var,
    params: &AttentionParams<Var>,
) -> Result<(Var, Vec<Tensor>)> {
    let c = x.shape()[1];
    let h = params.heads;
    if c % h != 0 {
        return Err(Error::Config(format!(
            "width {c} not divisible by {h} heads"
        )));
    }
    let t = x.shape()[0];
    let d = c / h;
    let q_all = tape.matmul(x, &params.wq)?;
    let k_all = tape.matmul(x, &params.wk)?;
    let v_all = tape.matmul(x, &params.wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outs = Vec::with_capacity(h);
    let mut maps = Vec::with_capacity(h);
    for head in 0..h {
        let q = tape.slice(&q_all, 1, head * d, d)?;
        let k = tape.slice(&k_all, 1, head * d, d)?;
        let v = tape.slice(&v_all, 1, head * d, d)?;
        let kt = tape.transpose(&k)?;
        let scores = tape.matmul(&q, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let attn = tape.softmax(&scaled, 1)?;
        tape.note_attn_entries((t * t) as u64);
        maps.push(attn.value().clone());
        head_outs.push(tape.matmul(&attn, &v)?);
    }
    let refs: Vec<&Var> = head_outs.iter().collect();
    let cat = tape.concat(&refs, 1)?;
    let out = tape.linear(&cat, &params.wo, &params.bo)?;
    Ok((out, maps))
}

/// Two-layer MLP with a GELU after the first layer; the hidden width is the
/// expanding ratio times the input width.
pub fn ffn(tape: &mut Tape, x: &Var, params: &FfnParams<Var>) -> Result<Var> {
    let hidden = tape.linear(x, &params.w1, &params.b1)?;
    let act = tape.gelu(&hidden)?;
    tape.linear(&act, &params.w2, &params.b2)
}

/// Pre-LN encoder block with residual shortcuts. In training mode each
/// residual branch is dropped per sample with probability `drop_path_p` and
/// scaled by `1/(1−p)` when kept; in eval mode the branches are always
/// added, untouched.
pub fn encoder_block(
    tape: &mut Tape,
    x: &Var,
    params: &EncoderParams<Var>,
    drop_path_p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&drop_path_p) {
        return Err(Error::Config(format!(
            "drop_path_p must be in [0, 1), got {drop_path_p}"
        )));
    }
    let ln1 = tape.layer_norm(x, &params.ln1.gamma, &params.ln1.beta, LN_EPS)?;
    let attn_out = msa(tape, &ln1, &params.attn)?;
    let y = residual_add(tape, x, &attn_out, drop_path_p, training, rng)?;
    let ln2 = tape.layer_norm(&y, &params.ln2.gamma, &params.ln2.beta, LN_EPS)?;
    let ffn_out = ffn(tape, &ln2, &params.ffn)?;
    residual_add(tape, &y, &ffn_out, drop_path_p, training, rng)
}

fn residual_add(
    tape: &mut Tape,
    x: &Var,
    branch: &Var,
    drop_path_p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if training && drop_path_p > 0.0 {
        let keep = rng.gen::<f64>() >= drop_path_p;
        let factor = if keep { 1.0 / (1.0 - drop_path_p) } else { 0.0 };
        let scaled = tape.scale(branch, factor)?;
        tape.add(x, &scaled)
    } else {
        tape.add(x, branch)
    }
}

/// Rescales a learnt position embedding to a new patch grid: CLS rows are
/// copied unchanged and the patch rows are bicubically resampled per
/// channel. `cls_rows` is 1 normally and 0 for the no-CLS variant.
pub fn resize_pos_embed(
    pos: &Tensor,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
    cls_rows: usize,
) -> Result<Tensor> {
    let n_old = old_grid.0 * old_grid.1;
    if pos.shape()[0] != cls_rows + n_old {
        return Err(Error::contract(
            "resize_pos_embed",
            format!(
                "embedding has {} rows, expected {} for grid {old_grid:?}",
                pos.shape()[0],
                cls_rows + n_old
            ),
        ));
    }
    if old_grid == new_grid {
        return Ok(pos.clone());
    }
    let c = pos.shape()[1];
    let data = pos.data();
    let head = &data[..cls_rows * c];
    let patch = Tensor::from_vec(vec![n_old, c], data[cls_rows * c..].to_vec())?;
    let resized = resize_token_grid_bicubic(&patch, old_grid, new_grid)?;
    let mut out = Vec::with_capacity((cls_rows + new_grid.0 * new_grid.1) * c);
    out.extend_from_slice(head);
    out.extend_from_slice(resized.data());
    Tensor::from_vec(vec![cls_rows + new_grid.0 * new_grid.1, c], out)
}

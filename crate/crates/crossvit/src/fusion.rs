//! Token fusion between the two branches.
//!
//! Four schemes are implemented. Writing `f` for the width-aligning
//! projection and `g` for its back-projection (single linear layers,
//! identity when the widths already match):
//!
//! * **All-attention** — concatenate both full sequences in a shared width
//!   and run one self-attention over everything:
//!   `y = [f_l(x_l) ‖ f_s(x_s)]`, `o = y + MSA(LN(y))`, split back, apply
//!   `g`. Its attention map has `(2+N_l+N_s)²` entries per head.
//! * **Class-token** — sum the projected CLS tokens, back-project into each
//!   branch, leave patches alone.
//! * **Pairwise** — bilinearly resample the other branch's patch grid onto
//!   this branch's grid and sum projected patch fields position by position;
//!   CLS tokens are summed separately.
//! * **Cross-attention** — each branch's projected CLS is the *only* query
//!   against the other branch's patch tokens:
//!
//!   ```text
//!   x' = [f(cls) ‖ patch_other]
//!   y  = f(cls) + MCA(LN(x'))          (no FFN on this path)
//!   z  = [g(y) ‖ patch_own]
//!   ```
//!
//!   The attention map is `1×(1+N_other)` per head, so generating it is
//!   linear in the other branch's token count rather than quadratic.

use crate::blocks::{msa, AttentionParams, LayerNormParams, TokenSeq, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Which fusion runs between the branches at the end of each multi-scale
/// encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScheme {
    None,
    AllAttention,
    ClassToken,
    Pairwise,
    #[default]
    CrossAttention,
}

impl FusionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            FusionScheme::None => "none",
            FusionScheme::AllAttention => "all-attention",
            FusionScheme::ClassToken => "class-token",
            FusionScheme::Pairwise => "pairwise",
            FusionScheme::CrossAttention => "cross-attention",
        }
    }
}

/// A width-aligning map: a single linear layer, or the identity when source
/// and target widths agree.
#[derive(Clone, Debug)]
pub enum Projection<T> {
    Identity,
    Linear { weight: T, bias: T },
}

impl<T> Projection<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Projection<U> {
        match self {
            Projection::Identity => Projection::Identity,
            Projection::Linear { weight, bias } => Projection::Linear {
                weight: f(weight),
                bias: f(bias),
            },
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Projection::Linear { weight, bias } = self {
            f(format!("{path}.weight"), weight);
            f(format!("{path}.bias"), bias);
        }
    }
}

/// Projection into another branch's width and back: `f: C_i→C_j`,
/// `g: C_j→C_i`. Token counts pass through unchanged.
#[derive(Clone, Debug)]
pub struct ProjectionPair<T> {
    pub f: Projection<T>,
    pub g: Projection<T>,
}

impl<T> ProjectionPair<T> {
    pub fn map<U>(&self, func: &mut impl FnMut(&T) -> U) -> ProjectionPair<U> {
        ProjectionPair {
            f: self.f.map(func),
            g: self.g.map(func),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, func: &mut dyn FnMut(String, &'a T)) {
        self.f.visit(&format!("{path}.f"), func);
        self.g.visit(&format!("{path}.g"), func);
    }
}

/// One direction of cross-attention fusion. The attention runs in the
/// key/value branch's width with that branch's head count. There are no
/// feed-forward weights on this path.
#[derive(Clone, Debug)]
pub struct CrossAttnDirection<T> {
    pub pair: ProjectionPair<T>,
    pub ln: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
}

impl<T> CrossAttnDirection<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> CrossAttnDirection<U> {
        CrossAttnDirection {
            pair: self.pair.map(f),
            ln: self.ln.map(f),
            attn: self.attn.map(f),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.pair.visit(path, f);
        self.ln.visit(&format!("{path}.ln"), f);
        self.attn.visit(&format!("{path}.attn"), f);
    }
}

/// Both directions of cross-attention fusion: the L-branch CLS querying
/// S-branch patches, and vice versa.
#[derive(Clone, Debug)]
pub struct CrossAttnParams<T> {
    pub l_from_s: CrossAttnDirection<T>,
    pub s_from_l: CrossAttnDirection<T>,
}

/// One shared self-attention over the concatenated sequences, in the larger
/// of the two widths.
#[derive(Clone, Debug)]
pub struct AllAttentionParams<T> {
    pub proj_l: ProjectionPair<T>,
    pub proj_s: ProjectionPair<T>,
    pub ln: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
}

/// Projection pairs only; CLS tokens are summed in the shared width.
#[derive(Clone, Debug)]
pub struct ClassTokenParams<T> {
    pub proj_l: ProjectionPair<T>,
    pub proj_s: ProjectionPair<T>,
}

/// Projection pairs shared by the CLS sum and the resampled patch sum.
#[derive(Clone, Debug)]
pub struct PairwiseParams<T> {
    pub proj_l: ProjectionPair<T>,
    pub proj_s: ProjectionPair<T>,
}

/// Fusion parameters for one pass of one multi-scale encoder.
#[derive(Clone, Debug)]
pub enum FusionParams<T> {
    None,
    AllAttention(AllAttentionParams<T>),
    ClassToken(ClassTokenParams<T>),
    Pairwise(PairwiseParams<T>),
    CrossAttention(CrossAttnParams<T>),
}

impl<T> FusionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FusionParams<U> {
        match self {
            FusionParams::None => FusionParams::None,
            FusionParams::AllAttention(p) => FusionParams::AllAttention(AllAttentionParams {
                proj_l: p.proj_l.map(f),
                proj_s: p.proj_s.map(f),
                ln: p.ln.map(f),
                attn: p.attn.map(f),
            }),
            FusionParams::ClassToken(p) => FusionParams::ClassToken(ClassTokenParams {
                proj_l: p.proj_l.map(f),
                proj_s: p.proj_s.map(f),
            }),
            FusionParams::Pairwise(p) => FusionParams::Pairwise(PairwiseParams {
                proj_l: p.proj_l.map(f),
                proj_s: p.proj_s.map(f),
            }),
            FusionParams::CrossAttention(p) => FusionParams::CrossAttention(CrossAttnParams {
                l_from_s: p.l_from_s.map(f),
                s_from_l: p.s_from_l.map(f),
            }),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            FusionParams::None => {}
            FusionParams::AllAttention(p) => {
                p.proj_l.visit(&format!("{path}.proj_l"), f);
                p.proj_s.visit(&format!("{path}.proj_s"), f);
                p.ln.visit(&format!("{path}.ln"), f);
                p.attn.visit(&format!("{path}.attn"), f);
            }
            FusionParams::ClassToken(p) => {
                p.proj_l.visit(&format!("{path}.proj_l"), f);
                p.proj_s.visit(&format!("{path}.proj_s"), f);
            }
            FusionParams::Pairwise(p) => {
                p.proj_l.visit(&format!("{path}.proj_l"), f);
                p.proj_s.visit(&format!("{path}.proj_s"), f);
            }
            FusionParams::CrossAttention(p) => {
                p.l_from_s.visit(&format!("{path}.l_from_s"), f);
                p.s_from_l.visit(&format!("{path}.s_from_l"), f);
            }
        }
    }
}

// ─────────────────────────────── operations ───────────────────────────────

pub fn apply_projection(tape: &mut Tape, x: &Var, p: &Projection<Var>) -> Result<Var> {
    match p {
        Projection::Identity => Ok(x.clone()),
        Projection::Linear { weight, bias } => tape.linear(x, weight, bias),
    }
}

/// Replaces a branch's CLS token by attending from its projected CLS over
/// the other branch's patch tokens. Returns the back-projected CLS row; the
/// caller reassembles the sequence. `patch` may be `None` for the degenerate
/// no-patch case, where the single query attends only to itself.
pub fn cross_attention(
    tape: &mut Tape,
    cls: &Var,
    patch: Option<&Var>,
    dir: &CrossAttnDirection<Var>,
) -> Result<Var> {
    let f_cls = apply_projection(tape, cls, &dir.pair.f)?;
    let x = match patch {
        Some(p) => tape.concat(&[&f_cls, p], 0)?,
        None => f_cls.clone(),
    };
    let t = x.shape()[0];
    let c = x.shape()[1];
    let h = dir.attn.heads;
    if c % h != 0 {
        return Err(Error::Config(format!(
            "cross-attention width {c} not divisible by {h} heads"
        )));
    }
    let d = c / h;
    let u = tape.layer_norm(&x, &dir.ln.gamma, &dir.ln.beta, LN_EPS)?;
    // the CLS row is the only query; keys and values cover the whole of x'
    let q_row = tape.slice(&u, 0, 0, 1)?;
    let q_all = tape.matmul(&q_row, &dir.attn.wq)?;
    let k_all = tape.matmul(&u, &dir.attn.wk)?;
    let v_all = tape.matmul(&u, &dir.attn.wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outs = Vec::with_capacity(h);
    for head in 0..h {
        let q = tape.slice(&q_all, 1, head * d, d)?;
        let k = tape.slice(&k_all, 1, head * d, d)?;
        let v = tape.slice(&v_all, 1, head * d, d)?;
        let kt = tape.transpose(&k)?;
        let scores = tape.matmul(&q, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let attn = tape.softmax(&scaled, 1)?;
        tape.note_attn_entries(t as u64);
        head_outs.push(tape.matmul(&attn, &v)?);
    }
    let refs: Vec<&Var> = head_outs.iter().collect();
    let cat = tape.concat(&refs, 1)?;
    let mca = tape.linear(&cat, &dir.attn.wo, &dir.attn.bo)?;
    // residual in the projected width, then back-project
    let y = tape.add(&f_cls, &mca)?;
    apply_projection(tape, &y, &dir.pair.g)
}

/// Cross-attention fusion in both directions. Patch tokens pass through
/// untouched; only the CLS rows are replaced.
pub fn fuse_cross_attention(
    tape: &mut Tape,
    xl: &TokenSeq,
    xs: &TokenSeq,
    params: &CrossAttnParams<Var>,
) -> Result<(TokenSeq, TokenSeq)> {
    let cls_l = cross_attention(tape, &xl.cls, Some(&xs.patch), &params.l_from_s)?;
    let cls_s = cross_attention(tape, &xs.cls, Some(&xl.patch), &params.s_from_l)?;
    Ok((
        TokenSeq {
            cls: cls_l,
            patch: xl.patch.clone(),
            grid: xl.grid,
        },
        TokenSeq {
            cls: cls_s,
            patch: xs.patch.clone(),
            grid: xs.grid,
        },
    ))
}

/// Concatenates both full sequences in the shared width, runs one
/// self-attention with a residual, splits by the original token counts, and
/// back-projects each half.
pub fn fuse_all_attention(
    tape: &mut Tape,
    xl: &TokenSeq,
    xs: &TokenSeq,
    params: &AllAttentionParams<Var>,
) -> Result<(TokenSeq, TokenSeq)> {
    let full_l = xl.full(tape)?;
    let full_s = xs.full(tape)?;
    let yl = apply_projection(tape, &full_l, &params.proj_l.f)?;
    let ys = apply_projection(tape, &full_s, &params.proj_s.f)?;
    let y = tape.concat(&[&yl, &ys], 0)?;
    let u = tape.layer_norm(&y, &params.ln.gamma, &params.ln.beta, LN_EPS)?;
    let attn_out = msa(tape, &u, &params.attn)?;
    let o = tape.add(&y, &attn_out)?;
    let rows_l = 1 + xl.num_patches();
    let rows_s = 1 + xs.num_patches();
    let ol = tape.slice(&o, 0, 0, rows_l)?;
    let os = tape.slice(&o, 0, rows_l, rows_s)?;
    let zl = apply_projection(tape, &ol, &params.proj_l.g)?;
    let zs = apply_projection(tape, &os, &params.proj_s.g)?;
    Ok((
        TokenSeq::from_full(tape, &zl, xl.grid)?,
        TokenSeq::from_full(tape, &zs, xs.grid)?,
    ))
}

/// Sums the projected CLS tokens of both branches and writes the
/// back-projected sum into each; patch tokens pass through untouched.
pub fn fuse_class_token(
    tape: &mut Tape,
    xl: &TokenSeq,
    xs: &TokenSeq,
    params: &ClassTokenParams<Var>,
) -> Result<(TokenSeq, TokenSeq)> {
    let fl = apply_projection(tape, &xl.cls, &params.proj_l.f)?;
    let fs = apply_projection(tape, &xs.cls, &params.proj_s.f)?;
    let sum = tape.add(&fl, &fs)?;
    let cls_l = apply_projection(tape, &sum, &params.proj_l.g)?;
    let cls_s = apply_projection(tape, &sum, &params.proj_s.g)?;
    Ok((
        TokenSeq {
            cls: cls_l,
            patch: xl.patch.clone(),
            grid: xl.grid,
        },
        TokenSeq {
            cls: cls_s,
            patch: xs.patch.clone(),
            grid: xs.grid,
        },
    ))
}

/// Fuses CLS tokens as in class-token fusion and patch tokens position by
/// position after bilinearly resampling the other branch's grid onto this
/// branch's grid.
pub fn fuse_pairwise(
    tape: &mut Tape,
    xl: &TokenSeq,
    xs: &TokenSeq,
    params: &PairwiseParams<Var>,
) -> Result<(TokenSeq, TokenSeq)> {
    if xl.grid.0 * xs.grid.1 != xl.grid.1 * xs.grid.0 {
        return Err(Error::Config(format!(
            "pairwise fusion needs matching grid aspect ratios, got {:?} and {:?}",
            xl.grid, xs.grid
        )));
    }
    let fl_cls = apply_projection(tape, &xl.cls, &params.proj_l.f)?;
    let fs_cls = apply_projection(tape, &xs.cls, &params.proj_s.f)?;
    let cls_sum = tape.add(&fl_cls, &fs_cls)?;
    let cls_l = apply_projection(tape, &cls_sum, &params.proj_l.g)?;
    let cls_s = apply_projection(tape, &cls_sum, &params.proj_s.g)?;

    // patches on the L grid
    let s_on_l = tape.resize_bilinear_grid(&xs.patch, xs.grid, xl.grid)?;
    let own_l = apply_projection(tape, &xl.patch, &params.proj_l.f)?;
    let other_l = apply_projection(tape, &s_on_l, &params.proj_s.f)?;
    let sum_l = tape.add(&own_l, &other_l)?;
    let patch_l = apply_projection(tape, &sum_l, &params.proj_l.g)?;

    // patches on the S grid
    let l_on_s = tape.resize_bilinear_grid(&xl.patch, xl.grid, xs.grid)?;
    let own_s = apply_projection(tape, &xs.patch, &params.proj_s.f)?;
    let other_s = apply_projection(tape, &l_on_s, &params.proj_l.f)?;
    let sum_s = tape.add(&own_s, &other_s)?;
    let patch_s = apply_projection(tape, &sum_s, &params.proj_s.g)?;

    Ok((
        TokenSeq {
            cls: cls_l,
            patch: patch_l,
            grid: xl.grid,
        },
        TokenSeq {
            cls: cls_s,
            patch: patch_s,
            grid: xs.grid,
        },
    ))
}

/// Mean of the patch rows, used in place of the CLS token when the no-CLS
/// variant is enabled.
pub fn cls_surrogate(tape: &mut Tape, seq: &TokenSeq) -> Result<Var> {
    tape.mean_rows(&seq.patch)
}

/// Runs the configured fusion scheme once.
pub fn fuse(
    tape: &mut Tape,
    xl: &TokenSeq,
    xs: &TokenSeq,
    params: &FusionParams<Var>,
) -> Result<(TokenSeq, TokenSeq)> {
    match params {
        FusionParams::None => Ok((xl.clone(), xs.clone())),
        FusionParams::AllAttention(p) => fuse_all_attention(tape, xl, xs, p),
        FusionParams::ClassToken(p) => fuse_class_token(tape, xl, xs, p),
        FusionParams::Pairwise(p) => fuse_pairwise(tape, xl, xs, p),
        FusionParams::CrossAttention(p) => fuse_cross_attention(tape, xl, xs, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64) * 0.7321 + phase).sin())
            .collect()
    }

    fn wave_tensor(shape: Vec<usize>, phase: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, wave(n, phase)).unwrap()
    }

    fn seq(tape: &mut Tape, grid: (usize, usize), c: usize, phase: f64) -> TokenSeq {
        let n = grid.0 * grid.1;
        TokenSeq {
            cls: Var::constant(wave_tensor(vec![1, c], phase)),
            patch: tape.leaf(wave_tensor(vec![n, c], phase + 1.0)),
            grid,
        }
    }

    fn identity_pair() -> ProjectionPair<Var> {
        ProjectionPair {
            f: Projection::Identity,
            g: Projection::Identity,
        }
    }

    fn attn(
        tape: &mut Tape,
        c: usize,
        heads: usize,
        phase: f64,
        zero: bool,
    ) -> AttentionParams<Var> {
        let make = |tape: &mut Tape, shape: Vec<usize>, ph: f64| {
            if zero {
                tape.leaf(Tensor::zeros(shape))
            } else {
                let n = shape.iter().product();
                tape.leaf(
                    Tensor::from_vec(shape, wave(n, ph).iter().map(|v| v * 0.3).collect()).unwrap(),
                )
            }
        };
        AttentionParams {
            wq: make(tape, vec![c, c], phase),
            wk: make(tape, vec![c, c], phase + 1.0),
            wv: make(tape, vec![c, c], phase + 2.0),
            wo: make(tape, vec![c, c], phase + 3.0),
            bo: make(tape, vec![c], phase + 4.0),
            heads,
        }
    }

    fn ln(tape: &mut Tape, c: usize) -> LayerNormParams<Var> {
        LayerNormParams {
            gamma: tape.leaf(Tensor::filled(vec![c], 1.0)),
            beta: tape.leaf(Tensor::zeros(vec![c])),
        }
    }

    fn cross_dir(tape: &mut Tape, c: usize, heads: usize, phase: f64) -> CrossAttnDirection<Var> {
        CrossAttnDirection {
            pair: identity_pair(),
            ln: ln(tape, c),
            attn: attn(tape, c, heads, phase, false),
        }
    }

    #[test]
    fn class_token_fusion_sums_cls_and_passes_patches() {
        let mut tape = Tape::new();
        let c = 6;
        let xl = seq(&mut tape, (2, 2), c, 0.0);
        let xs = seq(&mut tape, (3, 3), c, 5.0);
        let params = ClassTokenParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
        };
        let (zl, zs) = fuse_class_token(&mut tape, &xl, &xs, &params).unwrap();
        let expect = tape.add(&xl.cls, &xs.cls).unwrap();
        assert!(zl.cls.value().max_abs_diff(expect.value()) < 1e-15);
        assert!(zs.cls.value().max_abs_diff(expect.value()) < 1e-15);
        assert!(zl.patch.value().bit_eq(xl.patch.value()));
        assert!(zs.patch.value().bit_eq(xs.patch.value()));
    }

    #[test]
    fn class_token_fusion_zero_cls_passes_other_through() {
        let mut tape = Tape::new();
        let c = 4;
        let mut xl = seq(&mut tape, (2, 2), c, 0.0);
        xl.cls = Var::constant(Tensor::zeros(vec![1, c]));
        let xs = seq(&mut tape, (2, 2), c, 3.0);
        let params = ClassTokenParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
        };
        let (zl, _) = fuse_class_token(&mut tape, &xl, &xs, &params).unwrap();
        assert!(zl.cls.value().max_abs_diff(xs.cls.value()) < 1e-15);
    }

    #[test]
    fn pairwise_identity_config_sums_patches_elementwise() {
        let mut tape = Tape::new();
        let c = 5;
        let xl = seq(&mut tape, (3, 3), c, 0.0);
        let xs = seq(&mut tape, (3, 3), c, 2.0);
        let params = PairwiseParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
        };
        let (zl, zs) = fuse_pairwise(&mut tape, &xl, &xs, &params).unwrap();
        let expect = tape.add(&xl.patch, &xs.patch).unwrap();
        assert!(zl.patch.value().max_abs_diff(expect.value()) < 1e-12);
        assert!(zs.patch.value().max_abs_diff(expect.value()) < 1e-12);
    }

    #[test]
    fn pairwise_constant_field_interpolates_to_same_constant() {
        let mut tape = Tape::new();
        let c = 3;
        let xl = seq(&mut tape, (4, 4), c, 0.0);
        let mut xs = seq(&mut tape, (2, 2), c, 2.0);
        xs.patch = Var::constant(Tensor::filled(vec![4, c], 0.5));
        let zero_l = Var::constant(Tensor::zeros(vec![16, c]));
        let xl = TokenSeq {
            cls: xl.cls.clone(),
            patch: zero_l,
            grid: (4, 4),
        };
        let params = PairwiseParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
        };
        let (zl, _) = fuse_pairwise(&mut tape, &xl, &xs, &params).unwrap();
        for &v in zl.patch.value().data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_resize_matches_brute_force_bilinear_oracle() {
        // direct evaluation of the half-pixel-center bilinear formula
        let (ih, iw, oh, ow) = (20, 20, 14, 14);
        let src = wave_tensor(vec![ih * iw, 1], 0.9);
        let mut tape = Tape::new();
        let out = tape
            .resize_bilinear_grid(&Var::constant(src.clone()), (ih, iw), (oh, ow))
            .unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy =
                    ((oy as f64 + 0.5) * (ih as f64 / oh as f64) - 0.5).clamp(0.0, (ih - 1) as f64);
                let sx =
                    ((ox as f64 + 0.5) * (iw as f64 / ow as f64) - 0.5).clamp(0.0, (iw - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
                let at = |y: usize, x: usize| src.data()[y * iw + x];
                let expect = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + at(y0, x1) * (1.0 - ty) * tx
                    + at(y1, x0) * ty * (1.0 - tx)
                    + at(y1, x1) * ty * tx;
                let got = out.value().data()[oy * ow + ox];
                assert!(
                    (got - expect).abs() < 1e-9,
                    "({oy},{ox}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn pairwise_rejects_mismatched_aspect() {
        let mut tape = Tape::new();
        let xl = seq(&mut tape, (2, 4), 3, 0.0);
        let xs = seq(&mut tape, (3, 3), 3, 1.0);
        let params = PairwiseParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
        };
        assert!(fuse_pairwise(&mut tape, &xl, &xs, &params).is_err());
    }

    #[test]
    fn all_attention_zero_weights_is_residual_only() {
        let mut tape = Tape::new();
        let c = 6;
        let xl = seq(&mut tape, (2, 2), c, 0.0);
        let xs = seq(&mut tape, (3, 3), c, 5.0);
        let params = AllAttentionParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
            ln: ln(&mut tape, c),
            attn: attn(&mut tape, c, 2, 0.0, true),
        };
        let (zl, zs) = fuse_all_attention(&mut tape, &xl, &xs, &params).unwrap();
        // with all-zero attention weights, o = y, so z = g(f(x)) = x here
        assert!(zl.cls.value().max_abs_diff(xl.cls.value()) < 1e-15);
        assert!(zl.patch.value().max_abs_diff(xl.patch.value()) < 1e-15);
        assert!(zs.patch.value().max_abs_diff(xs.patch.value()) < 1e-15);
        // token counts preserved per branch
        assert_eq!(zl.num_patches(), xl.num_patches());
        assert_eq!(zs.num_patches(), xs.num_patches());
    }

    #[test]
    fn all_attention_map_is_quadratic_in_total_tokens() {
        let mut tape = Tape::new();
        let c = 4;
        let xl = seq(&mut tape, (14, 14), c, 0.0); // 196 patches
        let xs = seq(&mut tape, (20, 20), c, 1.0); // 400 patches
        let params = AllAttentionParams {
            proj_l: identity_pair(),
            proj_s: identity_pair(),
            ln: ln(&mut tape, c),
            attn: attn(&mut tape, c, 1, 0.0, true),
        };
        fuse_all_attention(&mut tape, &xl, &xs, &params).unwrap();
        assert_eq!(tape.attn_entries(), 598 * 598);
    }

    #[test]
    fn cross_attention_map_is_linear_in_other_branch_tokens() {
        let c = 6;
        let heads = 3;
        for n_other in [4usize, 9, 25] {
            let mut tape = Tape::new();
            let dir = cross_dir(&mut tape, c, heads, 0.3);
            let cls = Var::constant(wave_tensor(vec![1, c], 0.0));
            let patch = Var::constant(wave_tensor(vec![n_other, c], 1.0));
            cross_attention(&mut tape, &cls, Some(&patch), &dir).unwrap();
            assert_eq!(tape.attn_entries(), (heads * (1 + n_other)) as u64);
        }
    }

    #[test]
    fn cross_attention_zero_output_projection_is_residual_only() {
        let mut tape = Tape::new();
        let c = 6;
        let mut dir = cross_dir(&mut tape, c, 2, 0.3);
        dir.attn.wo = tape.leaf(Tensor::zeros(vec![c, c]));
        dir.attn.bo = tape.leaf(Tensor::zeros(vec![c]));
        let cls = Var::constant(wave_tensor(vec![1, c], 0.0));
        let patch = Var::constant(wave_tensor(vec![9, c], 1.0));
        let out = cross_attention(&mut tape, &cls, Some(&patch), &dir).unwrap();
        // with identity f and g and zero W_o, the fused CLS is the raw CLS
        assert!(out.value().max_abs_diff(cls.value()) < 1e-15);
    }

    #[test]
    fn cross_attention_no_patch_degenerate_single_query() {
        let mut tape = Tape::new();
        let c = 4;
        let dir = cross_dir(&mut tape, c, 2, 0.8);
        let cls = Var::constant(wave_tensor(vec![1, c], 0.4));
        let out = cross_attention(&mut tape, &cls, None, &dir).unwrap();
        // single token: each head's map is exactly [[1]], so the output is
        // cls + (LN(cls)·W_v heads concatenated)·W_o + b_o
        assert_eq!(tape.attn_entries(), 2);
        let u = tape
            .layer_norm(&cls, &dir.ln.gamma, &dir.ln.beta, LN_EPS)
            .unwrap();
        let v = tape.matmul(&u, &dir.attn.wv).unwrap();
        let proj = tape.linear(&v, &dir.attn.wo, &dir.attn.bo).unwrap();
        let expect = tape.add(&cls, &proj).unwrap();
        assert!(out.value().max_abs_diff(expect.value()) < 1e-12);
    }

    #[test]
    fn cross_attention_equals_row_zero_of_full_self_attention() {
        // full self-attention over x' with the same weights, restricted to
        // the CLS row, must reproduce the single-query path exactly
        let mut tape = Tape::new();
        let c = 8;
        let dir = cross_dir(&mut tape, c, 2, 1.7);
        let cls = Var::constant(wave_tensor(vec![1, c], 0.0));
        let patch = Var::constant(wave_tensor(vec![6, c], 2.0));
        let got = cross_attention(&mut tape, &cls, Some(&patch), &dir).unwrap();

        let x = tape.concat(&[&cls, &patch], 0).unwrap();
        let u = tape
            .layer_norm(&x, &dir.ln.gamma, &dir.ln.beta, LN_EPS)
            .unwrap();
        let full = msa(&mut tape, &u, &dir.attn).unwrap();
        let row0 = tape.slice(&full, 0, 0, 1).unwrap();
        let expect = tape.add(&cls, &row0).unwrap();
        assert!(got.value().max_abs_diff(expect.value()) < 1e-9);
    }

    #[test]
    fn fused_patches_bit_identical_for_cls_and_cross_schemes() {
        let mut tape = Tape::new();
        let (cl, cs) = (6, 4);
        let xl = seq(&mut tape, (3, 3), cl, 0.0);
        let xs = seq(&mut tape, (4, 4), cs, 5.0);
        let lin = |tape: &mut Tape, from: usize, to: usize, ph: f64| Projection::Linear {
            weight: tape.leaf(wave_tensor(vec![from, to], ph)),
            bias: tape.leaf(wave_tensor(vec![to], ph + 0.5)),
        };
        let pair_l = ProjectionPair {
            f: lin(&mut tape, cl, cs, 0.1),
            g: lin(&mut tape, cs, cl, 0.2),
        };
        let pair_s = ProjectionPair {
            f: lin(&mut tape, cs, cl, 0.3),
            g: lin(&mut tape, cl, cs, 0.4),
        };
        let params = CrossAttnParams {
            l_from_s: CrossAttnDirection {
                pair: pair_l,
                ln: ln(&mut tape, cs),
                attn: attn(&mut tape, cs, 2, 0.0, false),
            },
            s_from_l: CrossAttnDirection {
                pair: pair_s,
                ln: ln(&mut tape, cl),
                attn: attn(&mut tape, cl, 2, 1.0, false),
            },
        };
        let (zl, zs) = fuse_cross_attention(&mut tape, &xl, &xs, &params).unwrap();
        assert!(zl.patch.value().bit_eq(xl.patch.value()));
        assert!(zs.patch.value().bit_eq(xs.patch.value()));
        assert_eq!(zl.cls.shape(), &[1, cl]);
        assert_eq!(zs.cls.shape(), &[1, cs]);
    }

    #[test]
    fn cross_attention_params_have_no_ffn() {
        let mut tape = Tape::new();
        let dir = cross_dir(&mut tape, 4, 2, 0.0);
        let mut names = Vec::new();
        dir.visit("fusion", &mut |name, _| names.push(name));
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| !n.contains("ffn")), "{names:?}");
    }

    #[test]
    fn cls_surrogate_examples() {
        let mut tape = Tape::new();
        let c = 4;
        // single patch token: the surrogate is that token
        let one = TokenSeq {
            cls: Var::constant(Tensor::zeros(vec![1, c])),
            patch: Var::constant(wave_tensor(vec![1, c], 0.7)),
            grid: (1, 1),
        };
        let s = cls_surrogate(&mut tape, &one).unwrap();
        assert!(s.value().max_abs_diff(one.patch.value()) < 1e-15);

        // t and −t average to zero
        let t = wave(c, 0.2);
        let mut data = t.clone();
        data.extend(t.iter().map(|v| -v));
        let two = TokenSeq {
            cls: Var::constant(Tensor::zeros(vec![1, c])),
            patch: Var::constant(Tensor::from_vec(vec![2, c], data).unwrap()),
            grid: (1, 2),
        };
        let s = cls_surrogate(&mut tape, &two).unwrap();
        for &v in s.value().data() {
            assert!(v.abs() < 1e-15);
        }
    }
}

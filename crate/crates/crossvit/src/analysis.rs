//! Closed-form cost accounting: parameter counts, multiply-accumulate
//! counts, and attention-map sizes per component.
//!
//! Conventions, pinned for the whole crate:
//!
//! * 1 FLOP = 1 multiply-accumulate. `flops` covers the tokenizer and every
//!   matmul-shaped operation (projections, attention scores and weighted
//!   sums, FFNs, fusion projections, heads).
//! * Elementwise work (softmax, layer norm, GELU) is tallied separately as
//!   `elementwise_ops` — the number of scalar outputs those ops produce.
//! * Image resizing is preprocessing and appears in no tally.
//!
//! The same numbers are counted live by the tape during a real forward, and
//! the two routes must agree exactly; that equality is what the tests pin.

use crate::config::{Branch, ModelConfig, TokenizerKind};
use crate::error::{Error, Result};
use crate::fusion::FusionScheme;

/// Cost of one named component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: &'static str,
    pub param_count: u64,
    pub flops: u64,
    pub attn_entries: u64,
}

/// Per-component rows plus crate-convention footnotes. Row order is fixed.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub elementwise_ops: u64,
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn total(&self) -> CostRow {
        let mut t = CostRow {
            name: "total",
            param_count: 0,
            flops: 0,
            attn_entries: 0,
        };
        for r in &self.rows {
            t.param_count += r.param_count;
            t.flops += r.flops;
            t.attn_entries += r.attn_entries;
        }
        t
    }

    /// CSV with the fixed header, one row per component, a totals row, and
    /// `#`-prefixed footer notes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,param_count,flops,attn_entries\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total())) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.name, r.param_count, r.flops, r.attn_entries
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("# {note}\n"));
        }
        out
    }
}

fn proj_pair_params(from: usize, to: usize) -> u64 {
    if from == to {
        0
    } else {
        ((from * to + to) + (to * from + from)) as u64
    }
}

fn block_params(c: usize, r: usize) -> u64 {
    let ln = 2 * c;
    let attn = 4 * c * c + c;
    let ffn = 2 * r * c * c + r * c + c;
    (2 * ln + attn + ffn) as u64
}

fn embed_params(config: &ModelConfig, which: Branch) -> Result<u64> {
    let b = config.branch(which);
    let c = b.embed_dim;
    let n = config.patch_tokens(which);
    let tokenizer = match b.tokenizer {
        TokenizerKind::Linear => (b.patch_size * b.patch_size * 3 * c + c) as u64,
        TokenizerKind::Conv3 => {
            let stem = config.conv_stem(which)?.expect("validated");
            let mut c_in = 3;
            let mut sum = 0u64;
            for l in stem {
                sum += (l.kernel * l.kernel * c_in * l.channels + l.channels) as u64;
                c_in = l.channels;
            }
            sum
        }
    };
    let cls = if config.no_cls { 0 } else { c as u64 };
    let pos = ((config.cls_rows() + n) * c) as u64;
    Ok(tokenizer + cls + pos)
}

fn fusion_params_per_pass(config: &ModelConfig) -> u64 {
    let (cl, cs) = (config.large.embed_dim, config.small.embed_dim);
    let w = cl.max(cs);
    match config.fusion {
        FusionScheme::None => 0,
        FusionScheme::AllAttention => {
            proj_pair_params(cl, w)
                + proj_pair_params(cs, w)
                + (2 * w) as u64
                + (4 * w * w + w) as u64
        }
        FusionScheme::ClassToken | FusionScheme::Pairwise => {
            proj_pair_params(cl, w) + proj_pair_params(cs, w)
        }
        FusionScheme::CrossAttention => {
            let dir = |ci: usize, cj: usize| {
                proj_pair_params(ci, cj) + (2 * cj) as u64 + (4 * cj * cj + cj) as u64
            };
            dir(cl, cs) + dir(cs, cl)
        }
    }
}

fn head_params(c: usize, classes: usize) -> u64 {
    (2 * c + c * classes + classes) as u64
}

/// Closed-form parameter count; equals the element count of a built model.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let k = config.encoders as u64;
    let blocks_l = k * config.large.blocks_per_encoder as u64;
    let blocks_s = k * config.small.blocks_per_encoder as u64;
    let passes = k * config.effective_fusion_depth() as u64;
    Ok(embed_params(config, Branch::Large)?
        + blocks_l * block_params(config.large.embed_dim, config.large.ffn_ratio)
        + embed_params(config, Branch::Small)?
        + blocks_s * block_params(config.small.embed_dim, config.small.ffn_ratio)
        + passes * fusion_params_per_pass(config)
        + head_params(config.large.embed_dim, config.num_classes)
        + head_params(config.small.embed_dim, config.num_classes))
}

struct BranchGeometry {
    tokens: usize,
    embed_flops: u64,
    embed_elementwise: u64,
}

fn branch_geometry(config: &ModelConfig, which: Branch, side: usize) -> Result<BranchGeometry> {
    let b = config.branch(which);
    let c = b.embed_dim;
    let grid = side / b.patch_size;
    let n = grid * grid;
    match b.tokenizer {
        TokenizerKind::Linear => Ok(BranchGeometry {
            tokens: n,
            embed_flops: (n * 3 * b.patch_size * b.patch_size * c) as u64,
            embed_elementwise: 0,
        }),
        TokenizerKind::Conv3 => {
            let stem = config.conv_stem(which)?.expect("validated");
            let mut c_in = 3;
            let mut s = side;
            let mut flops = 0u64;
            let mut elementwise = 0u64;
            for (i, l) in stem.iter().enumerate() {
                let out = (s + 2 * l.padding - l.kernel) / l.stride + 1;
                flops += (l.channels * out * out * l.kernel * l.kernel * c_in) as u64;
                if i + 1 < stem.len() {
                    elementwise += (l.channels * out * out) as u64; // GELU outputs
                }
                c_in = l.channels;
                s = out;
            }
            Ok(BranchGeometry {
                tokens: n,
                embed_flops: flops,
                embed_elementwise: elementwise,
            })
        }
    }
}

/// MACs of one encoder block over `t` tokens of width `c`.
fn block_flops(t: usize, c: usize, r: usize) -> u64 {
    (4 * t * c * c + 2 * t * t * c + 2 * r * t * c * c) as u64
}

fn block_elementwise(t: usize, c: usize, r: usize, heads: usize) -> u64 {
    // ln1 + softmax + ln2 + gelu outputs
    (t * c + heads * t * t + t * c + t * r * c) as u64
}

/// Per-pass fusion costs `(flops, attn_entries, elementwise)`.
fn fusion_pass_cost(config: &ModelConfig, n_l: usize, n_s: usize) -> (u64, u64, u64) {
    let (cl, cs) = (config.large.embed_dim, config.small.embed_dim);
    let (hl, hs) = (config.large.heads, config.small.heads);
    let w = cl.max(cs);
    let shared_heads = if cl >= cs { hl } else { hs };
    let (tl, ts) = (1 + n_l, 1 + n_s);
    match config.fusion {
        FusionScheme::None => (0, 0, 0),
        FusionScheme::AllAttention => {
            let t = tl + ts;
            let mut flops = (4 * t * w * w + 2 * t * t * w) as u64;
            if cl != w {
                flops += (tl * cl * w + tl * w * cl) as u64;
            }
            if cs != w {
                flops += (ts * cs * w + ts * w * cs) as u64;
            }
            let attn = (shared_heads * t * t) as u64;
            let elementwise = (t * w + shared_heads * t * t) as u64;
            (flops, attn, elementwise)
        }
        FusionScheme::ClassToken => {
            let mut flops = 0u64;
            if cl != w {
                flops += (cl * w + w * cl) as u64;
            }
            if cs != w {
                flops += (cs * w + w * cs) as u64;
            }
            (flops, 0, 0)
        }
        FusionScheme::Pairwise => {
            let mut flops = 0u64;
            if cl != w {
                // f_l over cls + own patches + resampled patches on the S grid,
                // g_l over cls + L-grid patches
                flops += ((1 + n_l + n_s) * cl * w + (1 + n_l) * w * cl) as u64;
            }
            if cs != w {
                flops += ((1 + n_l + n_s) * cs * w + (1 + n_s) * w * cs) as u64;
            }
            (flops, 0, 0)
        }
        FusionScheme::CrossAttention => {
            // one direction: query width ci projected into kv width cj over
            // t = 1 + n_other tokens
            let dir = |ci: usize, cj: usize, hj: usize, t: usize| {
                let mut flops = (2 * cj * cj + 2 * t * cj * cj + 2 * t * cj) as u64;
                if ci != cj {
                    flops += (ci * cj + cj * ci) as u64;
                }
                let attn = (hj * t) as u64;
                let elementwise = (t * cj + hj * t) as u64;
                (flops, attn, elementwise)
            };
            let (f1, a1, e1) = dir(cl, cs, hs, ts);
            let (f2, a2, e2) = dir(cs, cl, hl, tl);
            (f1 + f2, a1 + a2, e1 + e2)
        }
    }
}

/// Closed-form cost report for one forward pass of one image at
/// `input_side` pixels (branch sides scale proportionally; sides that do
/// not scale to whole multiples of the patch size are rejected).
pub fn count_flops(config: &ModelConfig, input_side: usize) -> Result<CostReport> {
    config.validate()?;
    let base = config.base_input_side;
    let side = |which: Branch| -> Result<usize> {
        let s = config.branch_side(which) * input_side;
        if s % base != 0 {
            return Err(Error::Config(format!(
                "input side {input_side} does not scale branch side {} to an integer",
                config.branch_side(which)
            )));
        }
        let s = s / base;
        if s % config.branch(which).patch_size != 0 {
            return Err(Error::Config(format!(
                "scaled side {s} not divisible by patch size {}",
                config.branch(which).patch_size
            )));
        }
        Ok(s)
    };
    let side_l = side(Branch::Large)?;
    let side_s = side(Branch::Small)?;

    let geo_l = branch_geometry(config, Branch::Large, side_l)?;
    let geo_s = branch_geometry(config, Branch::Small, side_s)?;
    let (tl, ts) = (1 + geo_l.tokens, 1 + geo_s.tokens);
    let k = config.encoders as u64;
    let blocks_l = k * config.large.blocks_per_encoder as u64;
    let blocks_s = k * config.small.blocks_per_encoder as u64;
    let passes = k * config.effective_fusion_depth() as u64;

    let (cl, cs) = (config.large.embed_dim, config.small.embed_dim);
    let (rl, rs) = (config.large.ffn_ratio, config.small.ffn_ratio);
    let (hl, hs) = (config.large.heads, config.small.heads);
    let (fuse_flops, fuse_attn, fuse_elem) = fusion_pass_cost(config, geo_l.tokens, geo_s.tokens);

    let rows = vec![
        CostRow {
            name: "embed.large",
            param_count: embed_params(config, Branch::Large)?,
            flops: geo_l.embed_flops,
            attn_entries: 0,
        },
        CostRow {
            name: "blocks.large",
            param_count: blocks_l * block_params(cl, rl),
            flops: blocks_l * block_flops(tl, cl, rl),
            attn_entries: blocks_l * (hl * tl * tl) as u64,
        },
        CostRow {
            name: "embed.small",
            param_count: embed_params(config, Branch::Small)?,
            flops: geo_s.embed_flops,
            attn_entries: 0,
        },
        CostRow {
            name: "blocks.small",
            param_count: blocks_s * block_params(cs, rs),
            flops: blocks_s * block_flops(ts, cs, rs),
            attn_entries: blocks_s * (hs * ts * ts) as u64,
        },
        CostRow {
            name: "fusion",
            param_count: passes * fusion_params_per_pass(config),
            flops: passes * fuse_flops,
            attn_entries: passes * fuse_attn,
        },
        CostRow {
            name: "head.large",
            param_count: head_params(cl, config.num_classes),
            flops: (cl * config.num_classes) as u64,
            attn_entries: 0,
        },
        CostRow {
            name: "head.small",
            param_count: head_params(cs, config.num_classes),
            flops: (cs * config.num_classes) as u64,
            attn_entries: 0,
        },
    ];

    let elementwise_ops = geo_l.embed_elementwise
        + geo_s.embed_elementwise
        + blocks_l * block_elementwise(tl, cl, rl, hl)
        + blocks_s * block_elementwise(ts, cs, rs, hs)
        + passes * fuse_elem
        + (cl + cs) as u64; // head layer norms

    Ok(CostReport {
        rows,
        elementwise_ops,
        notes: vec![
            format!("elementwise_ops (softmax/layer-norm/GELU outputs): {elementwise_ops}"),
            "image resize is preprocessing and excluded from flops".to_string(),
            "1 flop = 1 multiply-accumulate".to_string(),
        ],
    })
}

/// MACs of a plain single-branch ViT: tokenizer, `depth` encoder blocks,
/// and a classification head, on a `side`-pixel input.
pub fn vit_flops(
    patch_size: usize,
    width: usize,
    depth: usize,
    ffn_ratio: usize,
    side: usize,
    num_classes: usize,
) -> u64 {
    let n = (side / patch_size) * (side / patch_size);
    let t = 1 + n;
    (n * 3 * patch_size * patch_size * width) as u64
        + depth as u64 * block_flops(t, width, ffn_ratio)
        + (width * num_classes) as u64
}

/// Attention-map entry counts of the two attention-based fusion schemes for
/// one fusion pass, plus their ratio.
#[derive(Clone, Debug)]
pub struct AttnCost {
    pub tokens_large: usize,
    pub tokens_small: usize,
    /// `h_s·(1+N_s) + h_l·(1+N_l)`: linear in token count.
    pub cross_entries: u64,
    /// `h·(2+N_l+N_s)²`: quadratic in token count.
    pub all_entries: u64,
    pub ratio: f64,
}

/// Entry counts for generating the fusion attention maps under the
/// cross-attention and all-attention schemes, independent of which scheme
/// the config actually selects.
pub fn attn_cost(config: &ModelConfig) -> Result<AttnCost> {
    config.validate()?;
    let n_l = config.patch_tokens(Branch::Large);
    let n_s = config.patch_tokens(Branch::Small);
    let (hl, hs) = (config.large.heads, config.small.heads);
    let shared_heads = if config.large.embed_dim >= config.small.embed_dim {
        hl
    } else {
        hs
    };
    let cross = (hs * (1 + n_s) + hl * (1 + n_l)) as u64;
    let all = (shared_heads * (2 + n_l + n_s) * (2 + n_l + n_s)) as u64;
    Ok(AttnCost {
        tokens_large: n_l,
        tokens_small: n_s,
        cross_entries: cross,
        all_entries: all,
        ratio: all as f64 / cross as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{micro_gradcheck, micro_overfit, preset, BranchConfig};
    use crate::model::{bind, build, forward};
    use crate::tensor::{Tape, Tensor};

    fn image(side: usize) -> Tensor {
        Tensor::from_fn(vec![3, side, side], |i| ((i as f64) * 0.17).sin() * 0.3)
    }

    fn instrumented(config: &ModelConfig) -> (u64, u64) {
        let params = build(config, 3).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, false);
        let mut rng = crate::model::unused_rng();
        forward(
            &mut tape,
            &bound,
            config,
            &image(config.base_input_side),
            false,
            &mut rng,
        )
        .unwrap();
        (tape.flops(), tape.attn_entries())
    }

    #[test]
    fn ffn_param_arithmetic_example() {
        // single FFN with C=4, r=4 and biases: 4·16 + 16 + 16·4 + 4 = 148
        let c = 4;
        let r = 4;
        let ffn = 2 * r * c * c + r * c + c;
        assert_eq!(ffn, 148);
    }

    #[test]
    fn param_count_matches_built_elements_for_presets() {
        for name in ["micro", "micro-gradcheck", "crossvit-ti"] {
            let cfg = preset(name, 10).unwrap();
            let params = build(&cfg, 0).unwrap();
            assert_eq!(
                count_params(&cfg).unwrap(),
                params.element_count(),
                "{name}"
            );
        }
    }

    #[test]
    fn param_count_matches_built_elements_for_random_configs() {
        // 50 random valid configs over schemes, widths, tokenizers, variants
        let mut seed = 0u64;
        let mut next = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (seed >> 33) as usize
        };
        for i in 0..50 {
            let fusion = match next() % 5 {
                0 => FusionScheme::None,
                1 => FusionScheme::AllAttention,
                2 => FusionScheme::ClassToken,
                3 => FusionScheme::Pairwise,
                _ => FusionScheme::CrossAttention,
            };
            let hl = 1 + next() % 2;
            let hs = 1 + next() % 2;
            let cl = hl * (4 + 2 * (next() % 3));
            let cs_candidate = hs * (2 + 2 * (next() % 3));
            let cs = if next() % 4 == 0 { cl } else { cs_candidate };
            let cfg = ModelConfig {
                num_classes: 2 + next() % 5,
                base_input_side: 16,
                encoders: 1 + next() % 2,
                fusion_depth: 1 + next() % 2,
                fusion,
                drop_path: 0.0,
                no_cls: next() % 3 == 0,
                large: BranchConfig {
                    patch_size: 8,
                    embed_dim: cl,
                    blocks_per_encoder: 1 + next() % 2,
                    heads: hl,
                    ffn_ratio: 1 + next() % 3,
                    tokenizer: if next() % 3 == 0 {
                        TokenizerKind::Conv3
                    } else {
                        TokenizerKind::Linear
                    },
                    input_side: None,
                    conv_stem: None,
                },
                small: BranchConfig {
                    patch_size: 4,
                    embed_dim: cs,
                    blocks_per_encoder: 1 + next() % 2,
                    heads: hs,
                    ffn_ratio: 1 + next() % 3,
                    tokenizer: TokenizerKind::Linear,
                    input_side: None,
                    conv_stem: None,
                },
            };
            // widths must divide heads; cs built from hs so both hold
            if cs % hs != 0 || cl % hl != 0 {
                continue;
            }
            let params = build(&cfg, i).unwrap();
            assert_eq!(
                count_params(&cfg).unwrap(),
                params.element_count(),
                "config {i}: {cfg:?}"
            );
        }
    }

    #[test]
    fn head_param_delta_per_added_class() {
        let mut cfg = micro_gradcheck(4);
        let base = count_params(&cfg).unwrap();
        cfg.num_classes = 5;
        let plus_one = count_params(&cfg).unwrap();
        let (cl, cs) = (cfg.large.embed_dim as u64, cfg.small.embed_dim as u64);
        assert_eq!(plus_one - base, (cl + 1) + (cs + 1));
    }

    #[test]
    fn flops_and_attn_entries_match_instrumented_forward_exactly() {
        for fusion in [
            FusionScheme::None,
            FusionScheme::AllAttention,
            FusionScheme::ClassToken,
            FusionScheme::Pairwise,
            FusionScheme::CrossAttention,
        ] {
            let mut cfg = micro_gradcheck(4);
            cfg.fusion = fusion;
            cfg.fusion_depth = 1;
            let report = count_flops(&cfg, cfg.base_input_side).unwrap();
            let (flops, attn) = instrumented(&cfg);
            let total = report.total();
            assert_eq!(total.flops, flops, "{fusion:?}");
            assert_eq!(total.attn_entries, attn, "{fusion:?}");
        }
    }

    #[test]
    fn instrumented_match_with_unequal_widths_conv_and_no_cls() {
        let mut cfg = micro_overfit(10);
        cfg.large.tokenizer = TokenizerKind::Conv3;
        for fusion in [
            FusionScheme::AllAttention,
            FusionScheme::ClassToken,
            FusionScheme::Pairwise,
            FusionScheme::CrossAttention,
        ] {
            for no_cls in [false, true] {
                cfg.fusion = fusion;
                cfg.no_cls = no_cls;
                let report = count_flops(&cfg, cfg.base_input_side).unwrap();
                let (flops, attn) = instrumented(&cfg);
                let total = report.total();
                assert_eq!(total.flops, flops, "{fusion:?} no_cls={no_cls}");
                assert_eq!(total.attn_entries, attn, "{fusion:?} no_cls={no_cls}");
            }
        }
    }

    #[test]
    fn ffn_flops_per_token() {
        // FFN cost per token is 2·r·C² exactly: two matmuls
        let c = 32;
        let r = 4;
        let t = 7;
        let with = block_flops(t, c, r);
        let without = block_flops(t, c, 0);
        assert_eq!((with - without) / t as u64, (2 * r * c * c) as u64);
    }

    #[test]
    fn patch16_vs_patch32_flop_ratio_near_four() {
        let f16 = vit_flops(16, 384, 12, 4, 224, 1000);
        let f32_ = vit_flops(32, 384, 12, 4, 224, 1000);
        let ratio = f16 as f64 / f32_ as f64;
        assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn attn_cost_closed_forms() {
        // N_l=196, N_s=400, h=6 on both: cross = 6·598, all = 6·598²
        let mut cfg = preset("crossvit-s", 10).unwrap();
        cfg.large.heads = 6;
        cfg.small.heads = 6;
        let cost = attn_cost(&cfg).unwrap();
        assert_eq!(cost.tokens_large, 196);
        assert_eq!(cost.tokens_small, 400);
        assert_eq!(cost.cross_entries, 6 * (401 + 197));
        assert_eq!(cost.cross_entries, 3_588);
        assert_eq!(cost.all_entries, 6 * 598 * 598);
        assert_eq!(cost.all_entries, 2_145_624);
    }

    #[test]
    fn doubling_tokens_scales_costs_linearly_and_quadratically() {
        let mut cfg = micro_overfit(10);
        cfg.large.heads = 2;
        cfg.small.heads = 2;
        let a = attn_cost(&cfg).unwrap();
        // doubling both patch counts: halve patch sizes
        cfg.large.patch_size = 4;
        cfg.small.patch_size = 2;
        let b = attn_cost(&cfg).unwrap();
        assert_eq!(b.tokens_large, 4 * a.tokens_large);
        assert_eq!(b.tokens_small, 4 * a.tokens_small);
        // entries track (1 + N): exactly linear in token count
        assert_eq!(
            b.cross_entries,
            (2 * (1 + b.tokens_small) + 2 * (1 + b.tokens_large)) as u64
        );
        let t_a = 2 + a.tokens_large + a.tokens_small;
        let t_b = 2 + b.tokens_large + b.tokens_small;
        assert_eq!(a.all_entries, (2 * t_a * t_a) as u64);
        assert_eq!(b.all_entries, (2 * t_b * t_b) as u64);
    }

    #[test]
    fn csv_shape_and_totals() {
        let cfg = micro_gradcheck(4);
        let report = count_flops(&cfg, 8).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "component,param_count,flops,attn_entries");
        assert_eq!(lines.len(), 1 + 7 + 1 + report.notes.len());
        assert!(lines[8].starts_with("total,"));
        let total = report.total();
        assert_eq!(total.param_count, count_params(&cfg).unwrap());
    }

    #[test]
    fn count_flops_rejects_bad_side() {
        let cfg = micro_gradcheck(4);
        assert!(count_flops(&cfg, 9).is_err());
    }
}

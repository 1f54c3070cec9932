//! Separable 2-d resampling kernels.
//!
//! Two conventions are used in this crate and pinned here:
//!
//! * **Bilinear, half-pixel centers** — image resizing and token-grid
//!   alignment in pairwise fusion. Source coordinate for output index `o` is
//!   `(o + 0.5)·(in/out) − 0.5`, clamped to the valid range. Equal sizes map
//!   indices exactly, and constant fields are reproduced exactly.
//! * **Bicubic, corner-aligned** — position-embedding grids. Source
//!   coordinate is `o·(in−1)/(out−1)` with a Catmull-Rom kernel (a = −0.5),
//!   so grid corners land exactly on source knots and an equal-size resize
//!   is an exact copy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling taps for one output index along one axis: up to four source
/// indices with weights that sum to 1.
#[derive(Clone)]
pub(crate) struct AxisTap {
    idx: [usize; 4],
    w: [f64; 4],
    n: usize,
}

impl AxisTap {
    pub(crate) fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.n]
            .iter()
            .copied()
            .zip(self.w[..self.n].iter().copied())
    }
}

/// Half-pixel-center bilinear taps mapping `out_len` outputs onto `in_len`
/// source samples.
pub(crate) fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let t = src - i0 as f64;
            let i1 = (i0 + 1).min(in_len - 1);
            AxisTap {
                idx: [i0, i1, 0, 0],
                w: [1.0 - t, t, 0.0, 0.0],
                n: 2,
            }
        })
        .collect()
}

/// Catmull-Rom weight for offset `x ∈ [0, 2]`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Corner-aligned bicubic taps. With `out_len == in_len` every output maps
/// exactly onto its source knot (weight pattern 0/1/0/0), so the resize is
/// an exact copy.
pub(crate) fn bicubic_axis(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    assert!(in_len > 0 && out_len > 0);
    let scale = if out_len == 1 {
        0.0
    } else {
        (in_len - 1) as f64 / (out_len - 1) as f64
    };
    (0..out_len)
        .map(|o| {
            let src = o as f64 * scale;
            let base = src.floor() as isize;
            let t = src - base as f64;
            let mut idx = [0usize; 4];
            let mut w = [0.0f64; 4];
            for k in 0..4 {
                let src_i = base - 1 + k as isize;
                idx[k] = src_i.clamp(0, in_len as isize - 1) as usize;
                w[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            // clamped-border taps can leave tiny weight-sum drift; renormalize
            let sum: f64 = w.iter().sum();
            for wk in w.iter_mut() {
                *wk /= sum;
            }
            AxisTap { idx, w, n: 4 }
        })
        .collect()
}

/// Resamples a row-major grid of `cols`-wide cells using precomputed taps.
pub(crate) fn resample_grid(
    data: &[f64],
    cols: usize,
    in_w: usize,
    taps_y: &[AxisTap],
    taps_x: &[AxisTap],
) -> Vec<f64> {
    let out_w = taps_x.len();
    let mut out = vec![0.0; taps_y.len() * out_w * cols];
    for (oy, ty) in taps_y.iter().enumerate() {
        for (ox, tx) in taps_x.iter().enumerate() {
            let dst = (oy * out_w + ox) * cols;
            for (yi, wy) in ty.iter() {
                for (xi, wx) in tx.iter() {
                    let src = (yi * in_w + xi) * cols;
                    let wgt = wy * wx;
                    for j in 0..cols {
                        out[dst + j] += data[src + j] * wgt;
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resize of a channels-first `[C×H×W]` image to `[C×out_h×out_w]`,
/// sampling at half-pixel centers. Used for dataset and per-branch input
/// resizing; its cost is treated as preprocessing, not model FLOPs.
pub fn resize_image_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::contract("resize_image", "expects [C×H×W]"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let taps_y = bilinear_axis(h, out_h);
    let taps_x = bilinear_axis(w, out_w);
    let data = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in taps_y.iter().enumerate() {
            for (ox, tx) in taps_x.iter().enumerate() {
                let mut acc = 0.0;
                for (yi, wy) in ty.iter() {
                    for (xi, wx) in tx.iter() {
                        acc += plane[yi * w + xi] * wy * wx;
                    }
                }
                out[(ch * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], out)
}

/// Bicubic resize of a row-major `[N×C]` grid of tokens (N = h·w cells) to a
/// new grid, per channel. Equal grids are returned bit-exactly.
pub fn resize_token_grid_bicubic(
    tokens: &Tensor,
    in_grid: (usize, usize),
    out_grid: (usize, usize),
) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != in_grid.0 * in_grid.1 {
        return Err(Error::contract(
            "resize_token_grid",
            format!("rows {} do not match grid {in_grid:?}", s[0]),
        ));
    }
    if in_grid == out_grid {
        return Ok(tokens.clone());
    }
    let cols = s[1];
    let taps_y = bicubic_axis(in_grid.0, out_grid.0);
    let taps_x = bicubic_axis(in_grid.1, out_grid.1);
    let out = resample_grid(tokens.data(), cols, in_grid.1, &taps_y, &taps_x);
    Tensor::from_vec(vec![out_grid.0 * out_grid.1, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_is_exact() {
        for n in [1, 3, 7] {
            for (o, tap) in bilinear_axis(n, n).iter().enumerate() {
                let taps: Vec<_> = tap.iter().collect();
                assert_eq!(taps[0].0, o);
                assert_eq!(taps[0].1, 1.0);
                assert_eq!(taps[1].1, 0.0);
            }
        }
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        for tap in bilinear_axis(20, 14) {
            let s: f64 = tap.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_identity_is_exact_copy() {
        let t = Tensor::from_fn(vec![9, 2], |i| i as f64 * 0.37 - 1.0);
        let r = resize_token_grid_bicubic(&t, (3, 3), (3, 3)).unwrap();
        assert!(r.bit_eq(&t));
    }

    #[test]
    fn bicubic_reproduces_constants() {
        let t = Tensor::filled(vec![4, 3], 2.5);
        let r = resize_token_grid_bicubic(&t, (2, 2), (5, 5)).unwrap();
        for &v in r.data() {
            assert!((v - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn bicubic_corner_aligned_hits_knots() {
        // 2x2 -> 4x4: all four corners of the output land exactly on source
        // knots under corner alignment.
        let t = Tensor::from_vec(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = resize_token_grid_bicubic(&t, (2, 2), (4, 4)).unwrap();
        let d = r.data();
        assert!((d[0] - 1.0).abs() < 1e-9); // (0,0)
        assert!((d[3] - 2.0).abs() < 1e-9); // (0,3)
        assert!((d[12] - 3.0).abs() < 1e-9); // (3,0)
        assert!((d[15] - 4.0).abs() < 1e-9); // (3,3)
    }

    #[test]
    fn image_resize_constant_field() {
        let img = Tensor::filled(vec![3, 8, 8], 0.25);
        let r = resize_image_bilinear(&img, 5, 5).unwrap();
        for &v in r.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}

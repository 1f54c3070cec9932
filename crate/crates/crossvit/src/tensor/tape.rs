//! Operation tape and reverse-mode gradients.
//!
//! A [`Tape`] records every tracked operation as it executes. Node ids grow
//! monotonically, so the recording order is already topological: every
//! operation appears after the producers of its inputs. [`Tape::backward`]
//! walks the records exactly once in reverse, dispatching one
//! vector-Jacobian product per node and accumulating gradients additively
//! when a value feeds several consumers.
//!
//! Values flow through [`Var`] handles. A `Var` holding `id == UNTRACKED`
//! carries only data: operations on untracked inputs compute their result
//! without recording anything, which is how eval-mode forwards stay off the
//! tape. The tape also tallies multiply-accumulate counts and attention-map
//! sizes so a real forward can be compared against the closed-form cost
//! model.

use super::math;
use super::resize::{bilinear_axis, resample_grid, AxisTap};
use super::Tensor;
use crate::error::{Error, Result};

const UNTRACKED: usize = usize::MAX;

/// A value produced during a forward evaluation, possibly tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Tensor,
}

impl Var {
    /// Wraps a tensor without tracking it; gradients never flow into it.
    pub fn constant(value: Tensor) -> Var {
        Var {
            id: UNTRACKED,
            value,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.id != UNTRACKED
    }
}

struct Node {
    out_shape: Vec<usize>,
    op: Op,
}

/// Saved context for each differentiable operation.
enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Matmul {
        a: usize,
        b: usize,
        a_val: Tensor,
        b_val: Tensor,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        x_val: Tensor,
        w_val: Tensor,
    },
    Transpose {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
        out: Tensor,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        gamma_val: Tensor,
    },
    Gelu {
        a: usize,
        a_val: Tensor,
    },
    Concat {
        axis: usize,
        parts: Vec<(usize, Vec<usize>)>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanRows {
        a: usize,
        rows: usize,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        x_val: Tensor,
        w_val: Tensor,
        stride: usize,
        padding: usize,
    },
    ImageToPatches {
        image: usize,
        patch: usize,
    },
    ResizeBilinearGrid {
        a: usize,
        taps_y: Vec<AxisTap>,
        taps_x: Vec<AxisTap>,
        cols: usize,
        in_grid: (usize, usize),
        out_grid: (usize, usize),
    },
}

/// Gradients produced by one [`Tape::backward`] pass, keyed by node id.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss with respect to `var`, if one was populated.
    pub fn get(&self, var: &Var) -> Option<Tensor> {
        if !var.tracked() {
            return None;
        }
        self.bufs[var.id].as_ref().map(|buf| {
            Tensor::from_vec(self.shapes[var.id].clone(), buf.clone()).expect("grad shape")
        })
    }
}

/// Records one forward evaluation; single-threaded by design. Concurrent
/// evaluations each use their own tape over shared read-only parameters.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
    attn_entries: u64,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Registers a tensor whose gradient should be computed.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let id = self.push(value.shape().to_vec(), Op::Leaf);
        Var { id, value }
    }

    /// Multiply-accumulate count of every matmul-like operation executed so
    /// far (matmul, linear, conv); elementwise work is not included.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Total attention-map entries noted via [`Tape::note_attn_entries`].
    pub fn attn_entries(&self) -> u64 {
        self.attn_entries
    }

    /// Called by attention code when it materializes an attention map.
    pub fn note_attn_entries(&mut self, entries: u64) {
        self.attn_entries += entries;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Scans recorded values-producing ops is not possible (values live in
    /// `Var`s), so this checks the saved op contexts for non-finite numbers
    /// and names the first offender. Used for NaN diagnostics in training.
    pub(crate) fn first_nonfinite_context(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            let (name, bad) = match &node.op {
                Op::Softmax { out, .. } => ("softmax output", !out.is_finite()),
                Op::Matmul { a_val, b_val, .. } => {
                    ("matmul input", !a_val.is_finite() || !b_val.is_finite())
                }
                Op::Linear { x_val, w_val, .. } => {
                    ("linear input", !x_val.is_finite() || !w_val.is_finite())
                }
                Op::Gelu { a_val, .. } => ("gelu input", !a_val.is_finite()),
                Op::LayerNorm { x_hat, .. } => {
                    ("layer_norm output", x_hat.iter().any(|v| !v.is_finite()))
                }
                Op::CrossEntropy { probs, .. } => (
                    "cross_entropy probabilities",
                    probs.iter().any(|v| !v.is_finite()),
                ),
                _ => continue,
            };
            if bad {
                return Some(format!("node {i}: {name}"));
            }
        }
        None
    }

    fn push(&mut self, out_shape: Vec<usize>, op: Op) -> usize {
        self.nodes.push(Node { out_shape, op });
        self.nodes.len() - 1
    }

    fn emit(&mut self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if tracked {
            let id = self.push(value.shape().to_vec(), op());
            Var { id, value }
        } else {
            Var::constant(value)
        }
    }

    // ───────────────────────── forward operations ─────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.tracked() || b.tracked(), || Op::Add {
            a: a.id,
            b: b.id,
        }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: &Var, factor: f64) -> Result<Var> {
        let data = a.value.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.tracked(), || Op::Scale { a: a.id, factor }))
    }

    /// `a[m×k] · b[k×n]`; gradients are `dA = dC·Bᵀ` and `dB = Aᵀ·dC`.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.value.rank() != 2 || b.value.rank() != 2 || a.value.cols() != b.value.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.value.rows(), a.value.cols(), b.value.cols());
        self.flops += (m * k * n) as u64;
        let data = math::matmul(a.value.data(), b.value.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.emit(value, a.tracked() || b.tracked(), || Op::Matmul {
            a: a.id,
            b: b.id,
            a_val: a.value.clone(),
            b_val: b.value.clone(),
        }))
    }

    /// Affine map `x[m×k]·w[k×n] + b[n]` with the bias broadcast over rows.
    pub fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        if x.value.rank() != 2 || w.value.rank() != 2 || x.value.cols() != w.value.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.value.rows(), x.value.cols(), w.value.cols());
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: vec![n],
                rhs: b.shape().to_vec(),
            });
        }
        self.flops += (m * k * n) as u64;
        let mut data = math::matmul(x.value.data(), w.value.data(), m, k, n);
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.value.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let tracked = x.tracked() || w.tracked() || b.tracked();
        Ok(self.emit(value, tracked, || Op::Linear {
            x: x.id,
            w: w.id,
            b: b.id,
            x_val: x.value.clone(),
            w_val: w.value.clone(),
        }))
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        if a.value.rank() != 2 {
            return Err(Error::contract("transpose", "expects a 2-d tensor"));
        }
        let (r, c) = (a.value.rows(), a.value.cols());
        let value = Tensor::from_vec(vec![c, r], math::transpose(a.value.data(), r, c))?;
        Ok(self.emit(value, a.tracked(), || Op::Transpose { a: a.id }))
    }

    /// Softmax along `axis`, overflow-safe via max subtraction. Every slice
    /// of the output sums to 1 and is strictly positive for finite input.
    pub fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = a.value.data();
        let mut out = vec![0.0; x.len()];
        let mut scratch_in = vec![0.0; len];
        let mut scratch_out = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    scratch_in[j] = x[(o * len + j) * inner + i];
                }
                math::softmax_slice(&scratch_in, &mut scratch_out);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = scratch_out[j];
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let out_clone = value.clone();
        Ok(self.emit(value, a.tracked(), || Op::Softmax {
            a: a.id,
            axis,
            out: out_clone,
        }))
    }

    /// Per-token normalization over the last axis followed by an affine map:
    /// `y = γ·(x − μ)/√(σ² + eps) + β`.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = x.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm", "input must have at least one axis"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = x.value.numel() / c;
        let xd = x.value.data();
        let gd = gamma.value.data();
        let bd = beta.value.data();
        let mut out = vec![0.0; xd.len()];
        let mut x_hat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                x_hat[r * c + j] = xh;
                out[r * c + j] = gd[j] * xh + bd[j];
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let tracked = x.tracked() || gamma.tracked() || beta.tracked();
        Ok(self.emit(value, tracked, || Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            x_hat,
            inv_std,
            gamma_val: gamma.value.clone(),
        }))
    }

    /// Tanh-approximation GELU, applied elementwise.
    pub fn gelu(&mut self, a: &Var) -> Result<Var> {
        let data = a.value.data().iter().map(|&v| math::gelu(v)).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.tracked(), || Op::Gelu {
            a: a.id,
            a_val: a.value.clone(),
        }))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    /// The gradient routes each slice back to the part it came from.
    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "needs at least one part"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::contract(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let data = p.value.data();
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let tracked = parts.iter().any(|p| p.tracked());
        Ok(self.emit(value, tracked, || Op::Concat {
            axis,
            parts: parts.iter().map(|p| (p.id, p.shape().to_vec())).collect(),
        }))
    }

    /// Copies `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::contract(
                "slice",
                format!(
                    "range {start}..{} out of bounds on axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let data = a.value.data();
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&data[src_start..src_start + len * inner]);
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.emit(value, a.tracked(), || Op::Slice {
            a: a.id,
            axis,
            start,
            in_shape: shape,
        }))
    }

    /// Reinterprets the storage under a new shape with the same element count.
    pub fn reshape(&mut self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != a.value.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_vec(shape, a.value.data().to_vec())?;
        Ok(self.emit(value, a.tracked(), || Op::Reshape { a: a.id }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: &Var) -> Result<Var> {
        let s: f64 = a.value.data().iter().sum();
        let value = Tensor::scalar(s);
        Ok(self.emit(value, a.tracked(), || Op::SumAll { a: a.id }))
    }

    /// Mean over the rows of a 2-d tensor, producing `1×C`.
    pub fn mean_rows(&mut self, a: &Var) -> Result<Var> {
        if a.value.rank() != 2 {
            return Err(Error::contract("mean_rows", "expects a 2-d tensor"));
        }
        let (rows, cols) = (a.value.rows(), a.value.cols());
        let data = a.value.data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += data[r * cols + j];
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let value = Tensor::from_vec(vec![1, cols], out)?;
        Ok(self.emit(value, a.tracked(), || Op::MeanRows { a: a.id, rows }))
    }

    /// `−log softmax(logits)[label]` as a scalar, computed overflow-safe.
    pub fn cross_entropy(&mut self, logits: &Var, label: usize) -> Result<Var> {
        if logits.value.rank() != 1 {
            return Err(Error::contract("cross_entropy", "logits must be rank 1"));
        }
        let k = logits.value.numel();
        if label >= k {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0; k];
        math::softmax_slice(logits.value.data(), &mut probs);
        let loss = -probs[label].ln();
        let value = Tensor::scalar(loss);
        Ok(self.emit(value, logits.tracked(), || Op::CrossEntropy {
            logits: logits.id,
            label,
            probs,
        }))
    }

    /// 2-d convolution over a channels-first image `[C_in×H×W]` with weights
    /// `[C_out×C_in×k×k]`, zero padding, and square stride.
    pub fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: &Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[3] != k || b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: ws,
                rhs: b.shape().to_vec(),
            });
        }
        if h + 2 * padding < k || wdt + 2 * padding < k || stride == 0 {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "kernel {k} with stride {stride}, padding {padding} does not fit {h}x{wdt}"
                ),
            ));
        }
        let oh = math::conv_out_side(h, k, stride, padding);
        let ow = math::conv_out_side(wdt, k, stride, padding);
        self.flops += (cout * oh * ow * k * k * cin) as u64;
        let xd = x.value.data();
        let wd = w.value.data();
        let bd = b.value.data();
        let mut out = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..cin {
                        for ky in 0..k {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xcoord = (ox * stride + kx) as isize - padding as isize;
                                if xcoord < 0 || xcoord >= wdt as isize {
                                    continue;
                                }
                                acc += xd[(ic * h + y as usize) * wdt + xcoord as usize]
                                    * wd[((oc * cin + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = Tensor::from_vec(vec![cout, oh, ow], out)?;
        let tracked = x.tracked() || w.tracked() || b.tracked();
        Ok(self.emit(value, tracked, || Op::Conv2d {
            x: x.id,
            w: w.id,
            b: b.id,
            x_val: x.value.clone(),
            w_val: w.value.clone(),
            stride,
            padding,
        }))
    }

    /// Rearranges a channels-first image `[3×H×W]` into a matrix of flattened
    /// `P×P` patches, one row per patch in grid row-major order. Within a
    /// row, pixels run row-major with channels innermost.
    pub fn image_to_patches(&mut self, image: &Var, patch: usize) -> Result<Var> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::contract("image_to_patches", "expects [C×H×W]"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "image side {h}x{w} not divisible by patch size {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let row_len = patch * patch * c;
        let data = image.value.data();
        let mut out = vec![0.0; n * row_len];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            out[row * row_len + (py * patch + px) * c + ch] =
                                data[(ch * h + gy * patch + py) * w + gx * patch + px];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, row_len], out)?;
        Ok(self.emit(value, image.tracked(), || Op::ImageToPatches {
            image: image.id,
            patch,
        }))
    }

    /// Bilinear resize of a token grid: rows of `a[N×C]` are grid cells in
    /// row-major order with `N = in_h·in_w`; the result has `out_h·out_w`
    /// rows. Each channel column is resampled as a 2-d field at half-pixel
    /// centers.
    pub fn resize_bilinear_grid(
        &mut self,
        a: &Var,
        in_grid: (usize, usize),
        out_grid: (usize, usize),
    ) -> Result<Var> {
        let s = a.shape().to_vec();
        if s.len() != 2 || s[0] != in_grid.0 * in_grid.1 {
            return Err(Error::contract(
                "resize_bilinear_grid",
                format!("rows {} do not match grid {in_grid:?}", s[0]),
            ));
        }
        let cols = s[1];
        let taps_y = bilinear_axis(in_grid.0, out_grid.0);
        let taps_x = bilinear_axis(in_grid.1, out_grid.1);
        let out = resample_grid(a.value.data(), cols, in_grid.1, &taps_y, &taps_x);
        let value = Tensor::from_vec(vec![out_grid.0 * out_grid.1, cols], out)?;
        Ok(self.emit(value, a.tracked(), || Op::ResizeBilinearGrid {
            a: a.id,
            taps_y,
            taps_x,
            cols,
            in_grid,
            out_grid,
        }))
    }

    // ───────────────────────────── backward ─────────────────────────────

    /// Reverse pass from a scalar loss. Fills a gradient buffer for every
    /// tracked node that the loss depends on; each recorded operation is
    /// visited exactly once, in reverse topological order.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.tracked() {
            return Err(Error::contract(
                "backward",
                "loss does not depend on any tracked tensor",
            ));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        bufs[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if bufs[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let g = bufs[id].take().expect("checked above");
            self.propagate(id, &g, &mut bufs);
        }
        let shapes = self.nodes.iter().map(|n| n.out_shape.clone()).collect();
        Ok(Grads { bufs, shapes })
    }

    fn accumulate(&self, bufs: &mut [Option<Vec<f64>>], target: usize, contrib: &[f64]) {
        if target == UNTRACKED {
            return;
        }
        let numel: usize = self.nodes[target].out_shape.iter().product();
        debug_assert_eq!(numel, contrib.len());
        let buf = bufs[target].get_or_insert_with(|| vec![0.0; numel]);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    fn propagate(&self, id: usize, g: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaf handled by backward loop"),
            Op::Add { a, b } => {
                self.accumulate(bufs, *a, g);
                self.accumulate(bufs, *b, g);
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(bufs, *a, &da);
            }
            Op::Matmul { a, b, a_val, b_val } => {
                let (m, k) = (a_val.rows(), a_val.cols());
                let n = b_val.cols();
                if *a != UNTRACKED {
                    let bt = math::transpose(b_val.data(), k, n);
                    let da = math::matmul(g, &bt, m, n, k);
                    self.accumulate(bufs, *a, &da);
                }
                if *b != UNTRACKED {
                    let at = math::transpose(a_val.data(), m, k);
                    let db = math::matmul(&at, g, k, m, n);
                    self.accumulate(bufs, *b, &db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                x_val,
                w_val,
            } => {
                let (m, k) = (x_val.rows(), x_val.cols());
                let n = w_val.cols();
                if *x != UNTRACKED {
                    let wt = math::transpose(w_val.data(), k, n);
                    let dx = math::matmul(g, &wt, m, n, k);
                    self.accumulate(bufs, *x, &dx);
                }
                if *w != UNTRACKED {
                    let xt = math::transpose(x_val.data(), m, k);
                    let dw = math::matmul(&xt, g, k, m, n);
                    self.accumulate(bufs, *w, &dw);
                }
                if *b != UNTRACKED {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(bufs, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let out_shape = &self.nodes[id].out_shape;
                let da = math::transpose(g, out_shape[0], out_shape[1]);
                self.accumulate(bufs, *a, &da);
            }
            Op::Softmax { a, axis, out } => {
                let shape = out.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = (o * len + j) * inner + i;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = (o * len + j) * inner + i;
                            da[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(bufs, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                gamma_val,
            } => {
                let c = gamma_val.numel();
                let rows = x_hat.len() / c;
                let gd = gamma_val.data();
                if *x != UNTRACKED {
                    let mut dx = vec![0.0; x_hat.len()];
                    for r in 0..rows {
                        let base = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gdy = g[base + j] * gd[j];
                            m1 += gdy;
                            m2 += gdy * x_hat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gdy = g[base + j] * gd[j];
                            dx[base + j] = inv_std[r] * (gdy - m1 - x_hat[base + j] * m2);
                        }
                    }
                    self.accumulate(bufs, *x, &dx);
                }
                if *gamma != UNTRACKED {
                    let mut dg = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * x_hat[r * c + j];
                        }
                    }
                    self.accumulate(bufs, *gamma, &dg);
                }
                if *beta != UNTRACKED {
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                    self.accumulate(bufs, *beta, &db);
                }
            }
            Op::Gelu { a, a_val } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a_val.data())
                    .map(|(gv, &xv)| gv * math::gelu_derivative(xv))
                    .collect();
                self.accumulate(bufs, *a, &da);
            }
            Op::Concat { axis, parts } => {
                let out_shape = &self.nodes[id].out_shape;
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for (pid, pshape) in parts {
                    let len = pshape[*axis];
                    if *pid != UNTRACKED {
                        let mut dp = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        self.accumulate(bufs, *pid, &dp);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                in_shape,
            } => {
                let (outer, axis_len, inner) = split_axis(in_shape, *axis);
                let len = self.nodes[id].out_shape[*axis];
                let mut da = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(bufs, *a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(bufs, *a, g);
            }
            Op::SumAll { a } => {
                if *a != UNTRACKED {
                    let numel: usize = self.nodes[*a].out_shape.iter().product();
                    let da = vec![g[0]; numel];
                    self.accumulate(bufs, *a, &da);
                }
            }
            Op::MeanRows { a, rows } => {
                if *a != UNTRACKED {
                    let cols = g.len();
                    let mut da = vec![0.0; rows * cols];
                    let inv = 1.0 / *rows as f64;
                    for r in 0..*rows {
                        for j in 0..cols {
                            da[r * cols + j] = g[j] * inv;
                        }
                    }
                    self.accumulate(bufs, *a, &da);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dl[*label] -= g[0];
                self.accumulate(bufs, *logits, &dl);
            }
            Op::Conv2d {
                x,
                w,
                b,
                x_val,
                w_val,
                stride,
                padding,
            } => {
                let xs = x_val.shape();
                let ws = w_val.shape();
                let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let oh = math::conv_out_side(h, k, *stride, *padding);
                let ow = math::conv_out_side(wdt, k, *stride, *padding);
                let xd = x_val.data();
                let wd = w_val.data();
                if *b != UNTRACKED {
                    let mut db = vec![0.0; cout];
                    for oc in 0..cout {
                        db[oc] = g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
                    }
                    self.accumulate(bufs, *b, &db);
                }
                let mut dw = vec![0.0; wd.len()];
                let mut dx = vec![0.0; xd.len()];
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(oc * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ic in 0..cin {
                                for ky in 0..k {
                                    let y = (oy * stride + ky) as isize - *padding as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let xc = (ox * stride + kx) as isize - *padding as isize;
                                        if xc < 0 || xc >= wdt as isize {
                                            continue;
                                        }
                                        let xi = (ic * h + y as usize) * wdt + xc as usize;
                                        let wi = ((oc * cin + ic) * k + ky) * k + kx;
                                        dw[wi] += gv * xd[xi];
                                        dx[xi] += gv * wd[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                if *w != UNTRACKED {
                    self.accumulate(bufs, *w, &dw);
                }
                if *x != UNTRACKED {
                    self.accumulate(bufs, *x, &dx);
                }
            }
            Op::ImageToPatches { image, patch } => {
                if *image != UNTRACKED {
                    let shape = &self.nodes[*image].out_shape;
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (gh, gw) = (h / patch, w / patch);
                    let row_len = patch * patch * c;
                    let mut di = vec![0.0; c * h * w];
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let row = gy * gw + gx;
                            for py in 0..*patch {
                                for px in 0..*patch {
                                    for ch in 0..c {
                                        di[(ch * h + gy * patch + py) * w + gx * patch + px] +=
                                            g[row * row_len + (py * patch + px) * c + ch];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(bufs, *image, &di);
                }
            }
            Op::ResizeBilinearGrid {
                a,
                taps_y,
                taps_x,
                cols,
                in_grid,
                out_grid,
            } => {
                if *a == UNTRACKED {
                    return;
                }
                let (h, w) = *in_grid;
                let ow = out_grid.1;
                let mut da = vec![0.0; h * w * cols];
                for (oy, ty) in taps_y.iter().enumerate() {
                    for (ox, tx) in taps_x.iter().enumerate() {
                        let src = (oy * ow + ox) * cols;
                        for (yi, wy) in ty.iter() {
                            for (xi, wx) in tx.iter() {
                                let dst = (yi * w + xi) * cols;
                                let wgt = wy * wx;
                                for j in 0..*cols {
                                    da[dst + j] += g[src + j] * wgt;
                                }
                            }
                        }
                    }
                }
                self.accumulate(bufs, *a, &da);
            }
        }
    }
}

/// Splits a shape at `axis` into `(outer, len, inner)` strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `loss(inputs)` w.r.t. every element of
    /// every input, evaluated with untracked forwards.
    fn numeric_grads(
        inputs: &[(Vec<usize>, Vec<f64>)],
        loss: &dyn Fn(&mut Tape, &[Var]) -> Var,
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let eval = |datas: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(datas)
                .map(|((shape, _), d)| {
                    Var::constant(Tensor::from_vec(shape.clone(), d.clone()).unwrap())
                })
                .collect();
            loss(&mut tape, &vars).value().data()[0]
        };
        let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
        inputs
            .iter()
            .enumerate()
            .map(|(which, (_, data))| {
                (0..data.len())
                    .map(|i| {
                        let mut plus = base.clone();
                        plus[which][i] += eps;
                        let mut minus = base.clone();
                        minus[which][i] -= eps;
                        (eval(&plus) - eval(&minus)) / (2.0 * eps)
                    })
                    .collect()
            })
            .collect()
    }

    /// Runs `loss` with tracked inputs and asserts every analytic gradient
    /// element matches the central difference within `tol` relative error
    /// (guarded denominator so near-zero gradients compare absolutely).
    fn assert_grads_match(
        inputs: &[(Vec<usize>, Vec<f64>)],
        loss: &dyn Fn(&mut Tape, &[Var]) -> Var,
        eps: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|(shape, data)| tape.leaf(Tensor::from_vec(shape.clone(), data.clone()).unwrap()))
            .collect();
        let out = loss(&mut tape, &vars);
        let grads = tape.backward(&out).unwrap();
        let numeric = numeric_grads(inputs, loss, eps);
        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get(var).expect("gradient populated");
            for (i, (&a, &n)) in analytic.data().iter().zip(&numeric[which]).enumerate() {
                let rel = (a - n).abs() / (1e-3 + a.abs().max(n.abs()));
                assert!(
                    rel < tol,
                    "input {which} element {i}: analytic {a} vs numeric {n} (rel {rel:.3e})"
                );
            }
        }
    }

    /// Deterministic pseudo-random values in [-1, 1] without pulling an RNG
    /// into op tests.
    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64) * 0.7321 + phase).sin())
            .collect()
    }

    fn weighted_sum(tape: &mut Tape, v: &Var, seed: f64) -> Var {
        let n = v.value().numel();
        let flat = tape.reshape(v, vec![1, n]).unwrap();
        let w = Var::constant(Tensor::from_vec(vec![n, 1], wave(n, seed)).unwrap());
        let prod = tape.matmul(&flat, &w).unwrap();
        tape.sum_all(&prod).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(&x, &x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_untracked_loss() {
        let tape = Tape::new();
        let loss = Var::constant(Tensor::scalar(1.0));
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let inputs = vec![(vec![3, 4], wave(12, 0.1)), (vec![4, 2], wave(8, 1.3))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let c = tape.matmul(&vars[0], &vars[1]).unwrap();
            tape.sum_all(&c).unwrap()
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let inputs = vec![(vec![5], wave(5, 0.4))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let s = tape.softmax(&vars[0], 0).unwrap();
            weighted_sum(tape, &s, 2.0)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::from_vec(vec![3, 4], wave(12, 0.9)).unwrap());
        let s = tape.softmax(&x, 1).unwrap();
        for row in s.value().data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let inputs = vec![
            (vec![3, 4], wave(12, 0.2)),
            (vec![4], vec![1.1, 0.9, -0.7, 1.3]),
            (vec![4], vec![0.1, -0.2, 0.3, 0.0]),
        ];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let y = tape.layer_norm(&vars[0], &vars[1], &vars[2], 1e-6).unwrap();
            weighted_sum(tape, &y, 0.7)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::filled(vec![1, 4], 5.0));
        let gamma = Var::constant(Tensor::filled(vec![4], 1.0));
        let beta = Var::constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row_is_fixed_point() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let gamma = Var::constant(Tensor::filled(vec![2], 1.0));
        let beta = Var::constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(&x, &gamma, &beta, 0.0).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments_pre_affine() {
        let mut tape = Tape::new();
        let x = Var::constant(
            Tensor::from_vec(vec![4, 8], wave(32, 0.5).iter().map(|v| v * 2.0).collect()).unwrap(),
        );
        let gamma = Var::constant(Tensor::filled(vec![8], 1.0));
        let beta = Var::constant(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for row in y.value().data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let inputs = vec![(vec![7], vec![-2.0, -0.5, 0.0, 0.25, 0.5, 1.0, 3.0])];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let y = tape.gelu(&vars[0]).unwrap();
            weighted_sum(tape, &y, 1.9)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-5);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::new();
        let a = Var::constant(Tensor::from_vec(vec![2, 3], wave(6, 0.0)).unwrap());
        let b = Var::constant(Tensor::from_vec(vec![1, 3], wave(3, 5.0)).unwrap());
        let cat = tape.concat(&[&a, &b], 0).unwrap();
        let a2 = tape.slice(&cat, 0, 0, 2).unwrap();
        let b2 = tape.slice(&cat, 0, 2, 1).unwrap();
        assert!(a2.value().bit_eq(a.value()));
        assert!(b2.value().bit_eq(b.value()));
    }

    #[test]
    fn concat_gradient_routes_by_position() {
        let inputs = vec![(vec![2, 2], wave(4, 0.3)), (vec![3, 2], wave(6, 2.2))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let cat = tape.concat(&[&vars[0], &vars[1]], 0).unwrap();
            weighted_sum(tape, &cat, 0.8)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);

        // and along columns
        let inputs = vec![(vec![2, 2], wave(4, 0.3)), (vec![2, 3], wave(6, 2.2))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let cat = tape.concat(&[&vars[0], &vars[1]], 1).unwrap();
            weighted_sum(tape, &cat, 0.8)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn slice_gradient_matches_finite_differences() {
        let inputs = vec![(vec![4, 3], wave(12, 1.0))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let s = tape.slice(&vars[0], 1, 1, 2).unwrap();
            weighted_sum(tape, &s, 0.45)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn linear_identity_weights() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::from_vec(vec![2, 3], wave(6, 0.6)).unwrap());
        let w = Var::constant(Tensor::eye(3));
        let b = Var::constant(Tensor::zeros(vec![3]));
        let y = tape.linear(&x, &w, &b).unwrap();
        assert!(y.value().max_abs_diff(x.value()) < 1e-15);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let inputs = vec![
            (vec![3, 2], wave(6, 0.0)),
            (vec![2, 4], wave(8, 1.0)),
            (vec![4], wave(4, 2.0)),
        ];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let y = tape.linear(&vars[0], &vars[1], &vars[2]).unwrap();
            weighted_sum(tape, &y, 3.0)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn transpose_gradient_matches_finite_differences() {
        let inputs = vec![(vec![2, 3], wave(6, 0.9))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let t = tape.transpose(&vars[0]).unwrap();
            weighted_sum(tape, &t, 1.4)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn mean_rows_matches_brute_force_and_gradient() {
        let data = wave(21, 0.0);
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::from_vec(vec![7, 3], data.clone()).unwrap());
        let m = tape.mean_rows(&x).unwrap();
        for j in 0..3 {
            let direct: f64 = (0..7).map(|r| data[r * 3 + j]).sum::<f64>() / 7.0;
            assert!((m.value().data()[j] - direct).abs() < 1e-12);
        }

        let inputs = vec![(vec![7, 3], data)];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let m = tape.mean_rows(&vars[0]).unwrap();
            weighted_sum(tape, &m, 0.2)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let inputs = vec![(vec![5], wave(5, 0.8))];
        let loss = |tape: &mut Tape, vars: &[Var]| tape.cross_entropy(&vars[0], 2).unwrap();
        assert_grads_match(&inputs, &loss, 1e-6, 1e-6);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let inputs = vec![
            (vec![2, 5, 5], wave(50, 0.1)),
            (vec![3, 2, 3, 3], wave(54, 1.1)),
            (vec![3], wave(3, 2.1)),
        ];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let y = tape.conv2d(&vars[0], &vars[1], &vars[2], 2, 1).unwrap();
            weighted_sum(tape, &y, 0.33)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-5);
    }

    #[test]
    fn image_to_patches_layout_and_gradient() {
        // 1 channel, 4x4 image, patch 2: row-major grid, channels innermost.
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::from_vec(vec![1, 4, 4], img.clone()).unwrap());
        let p = tape.image_to_patches(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.value().data()[..4], [0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.value().data()[4..8], [2.0, 3.0, 6.0, 7.0]);

        let inputs = vec![(vec![3, 4, 4], wave(48, 0.0))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let p = tape.image_to_patches(&vars[0], 2).unwrap();
            weighted_sum(tape, &p, 0.5)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn resize_grid_gradient_matches_finite_differences() {
        let inputs = vec![(vec![12, 2], wave(24, 0.7))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let r = tape.resize_bilinear_grid(&vars[0], (3, 4), (2, 3)).unwrap();
            weighted_sum(tape, &r, 1.2)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn scale_and_reshape_gradients() {
        let inputs = vec![(vec![2, 3], wave(6, 0.25))];
        let loss = |tape: &mut Tape, vars: &[Var]| {
            let s = tape.scale(&vars[0], -1.75).unwrap();
            let r = tape.reshape(&s, vec![3, 2]).unwrap();
            weighted_sum(tape, &r, 0.1)
        };
        assert_grads_match(&inputs, &loss, 1e-5, 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Var::constant(Tensor::zeros(vec![2, 3]));
        let b = Var::constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let x = Var::constant(Tensor::from_vec(vec![4, 4], wave(16, 0.0)).unwrap());
            let w = Var::constant(Tensor::from_vec(vec![4, 4], wave(16, 1.0)).unwrap());
            let y = tape.matmul(&x, &w).unwrap();
            let s = tape.softmax(&y, 1).unwrap();
            s.value().clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::zeros(vec![2, 2]));
        let y = tape.matmul(&x, &x).unwrap();
        let _ = tape.gelu(&y).unwrap();
        assert_eq!(tape.num_nodes(), 0);
        assert_eq!(tape.flops(), 8);
    }

    #[test]
    fn flop_counter_tallies_matmul_sizes() {
        let mut tape = Tape::new();
        let a = Var::constant(Tensor::zeros(vec![3, 4]));
        let b = Var::constant(Tensor::zeros(vec![4, 5]));
        tape.matmul(&a, &b).unwrap();
        assert_eq!(tape.flops(), 60);
    }
}

//! Dense f64 tensors and the hand-derived training kernels.
//!
//! Everything the model needs is implemented here as plain loops over
//! contiguous buffers: same-padded 2-D convolution (NCHW), ReLU, masked
//! softmax cross-entropy, the SGD update, and a central-finite-difference
//! gradient checker. There is no autodiff anywhere in the crate — each
//! operation exposes an explicit backward pass, and the finite-difference
//! checker is the referee.
//!
//! Conventions:
//!
//! * Activations and parameters are [`Tensor`] (f64); label maps and masks
//!   are [`MaskTensor`] (u8) with [`IGNORE_INDEX`] marking pixels excluded
//!   from the loss.
//! * Image batches are `N x C x H x W`; convolution kernels are
//!   `O x C x k x k` with odd `k` and zero padding of `k/2`, so spatial
//!   dimensions are preserved.
//! * Losses are means over *valid* (non-ignored) pixels; a batch with zero
//!   valid pixels has loss exactly `0.0` and a zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// A dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
        }
    }

    /// Wrap a value buffer; the buffer length must match the shape.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {expect} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Round every value through f32, in place.
    ///
    /// This is how single-precision mode is emulated: all arithmetic stays
    /// f64, but values are forced onto the f32 grid at well-defined points.
    pub fn round_to_single(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// A dense row-major u8 tensor holding class ids (plus [`IGNORE_INDEX`]).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTensor {
    shape: Vec<usize>,
    values: Vec<u8>,
}

impl MaskTensor {
    /// Mask of the given shape filled with one value.
    pub fn filled(shape: &[usize], value: u8) -> MaskTensor {
        MaskTensor {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
        }
    }

    /// Wrap a value buffer; the buffer length must match the shape.
    pub fn from_values(shape: &[usize], values: Vec<u8>) -> Result<MaskTensor> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::config(format!(
                "mask shape {shape:?} needs {expect} values, got {}",
                values.len()
            )));
        }
        Ok(MaskTensor {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }
}

/// Output y-range and x-range for a kernel tap shifted by `(dy, dx)`, such
/// that both the output pixel and the input pixel it reads are in bounds.
#[inline]
fn tap_ranges(dy: isize, dx: isize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    (y0, y1, x0, x1)
}

fn conv_check_shapes(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (ishape, kshape) = (input.shape(), kernel.shape());
    if ishape.len() != 4 || kshape.len() != 4 {
        return Err(Error::config(format!(
            "conv2d expects 4-d input and kernel, got {ishape:?} and {kshape:?}"
        )));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (o, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc != c {
        return Err(Error::config(format!(
            "conv2d channel mismatch: input has {c}, kernel expects {kc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::config(format!(
                "conv2d bias shape {:?} does not match {o} output channels",
                b.shape()
            )));
        }
    }
    Ok((n, c, h, w, o, kh))
}

/// Same-padded 2-D convolution.
///
/// `input` is `N x C x H x W`, `kernel` is `O x C x k x k` (odd square `k`),
/// `bias` is `O`. The output is `N x O x H x W`; out-of-bounds taps read
/// zero. The inner loops accumulate whole rows at a time so the compiler can
/// vectorize them.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, o, k) = conv_check_shapes(input, kernel, Some(bias))?;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let iv = input.values();
    let kv = kernel.values();
    let bv = bias.values();
    let ov = out.values_mut();

    for ni in 0..n {
        for oi in 0..o {
            let dst_base = (ni * o + oi) * plane;
            ov[dst_base..dst_base + plane].fill(bv[oi]);
            for ci in 0..c {
                let src_base = (ni * c + ci) * plane;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wgt = kv[((oi * c + ci) * k + ky) * k + kx];
                        let (y0, y1, x0, x1) = tap_ranges(dy, dx, h, w);
                        if x1 <= x0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src_row = src_base
                                + ((y as isize + dy) as usize) * w
                                + ((x0 as isize + dx) as usize);
                            let dst_row = dst_base + y * w + x0;
                            let len = x1 - x0;
                            let (src, dst) =
                                (&iv[src_row..src_row + len], &mut ov[dst_row..dst_row + len]);
                            for i in 0..len {
                                dst[i] += wgt * src[i];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`].
///
/// Given the upstream gradient `dout` (`N x O x H x W`), returns
/// `(d_input, d_kernel, d_bias)` with the same shapes as the corresponding
/// forward arguments.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, o, k) = conv_check_shapes(input, kernel, None)?;
    if dout.shape() != [n, o, h, w] {
        return Err(Error::config(format!(
            "conv2d_backward: upstream gradient shape {:?} does not match output {:?}",
            dout.shape(),
            [n, o, h, w]
        )));
    }
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut din = Tensor::zeros(input.shape());
    let mut dker = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[o]);
    let iv = input.values();
    let kv = kernel.values();
    let gv = dout.values();

    for ni in 0..n {
        for oi in 0..o {
            let g_base = (ni * o + oi) * plane;
            let gsum: f64 = gv[g_base..g_base + plane].iter().sum();
            dbias.values_mut()[oi] += gsum;
            for ci in 0..c {
                let i_base = (ni * c + ci) * plane;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let kidx = ((oi * c + ci) * k + ky) * k + kx;
                        let wgt = kv[kidx];
                        let (y0, y1, x0, x1) = tap_ranges(dy, dx, h, w);
                        if x1 <= x0 {
                            continue;
                        }
                        let len = x1 - x0;
                        let mut wacc = 0.0;
                        for y in y0..y1 {
                            let in_row = i_base
                                + ((y as isize + dy) as usize) * w
                                + ((x0 as isize + dx) as usize);
                            let g_row = g_base + y * w + x0;
                            // d_input: scatter the upstream gradient through
                            // this tap; d_kernel: dot the upstream gradient
                            // with the shifted input row.
                            let g = &gv[g_row..g_row + len];
                            let src = &iv[in_row..in_row + len];
                            let dst = &mut din.values_mut()[in_row..in_row + len];
                            let mut dot = 0.0;
                            for i in 0..len {
                                dst[i] += wgt * g[i];
                                dot += src[i] * g[i];
                            }
                            wacc += dot;
                        }
                        dker.values_mut()[kidx] += wacc;
                    }
                }
            }
        }
    }
    Ok((din, dker, dbias))
}

/// Element-wise `max(x, 0)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward pass of [`relu`]: passes the gradient where `x > 0`.
///
/// The subgradient at exactly zero is taken to be zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::config(format!(
            "relu_backward shape mismatch: {:?} vs {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let mut out = dy.clone();
    for (o, xv) in out.values_mut().iter_mut().zip(x.values()) {
        if *xv <= 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Masked softmax cross-entropy over per-pixel logits.
///
/// `logits` is `N x C x H x W`; `labels` is `N x H x W` holding class ids in
/// `[0, C)` or [`IGNORE_INDEX`]. Returns the mean loss over valid pixels and
/// the gradient with respect to the logits. Ignored pixels contribute
/// exactly zero loss and exactly zero gradient; a label outside
/// `[0, C) ∪ {IGNORE_INDEX}` is a data error. With zero valid pixels the
/// loss is `0.0` and the gradient is all zeros.
pub fn masked_softmax_cross_entropy(logits: &Tensor, labels: &MaskTensor) -> Result<(f64, Tensor)> {
    let lshape = logits.shape();
    if lshape.len() != 4 {
        return Err(Error::config(format!(
            "cross-entropy expects 4-d logits, got {lshape:?}"
        )));
    }
    let (n, c, h, w) = (lshape[0], lshape[1], lshape[2], lshape[3]);
    if labels.shape() != [n, h, w] {
        return Err(Error::config(format!(
            "cross-entropy labels shape {:?} does not match logits {:?}",
            labels.shape(),
            lshape
        )));
    }
    if c > usize::from(IGNORE_INDEX) {
        return Err(Error::config(format!(
            "cross-entropy supports at most {} classes, got {c}",
            IGNORE_INDEX
        )));
    }

    let plane = h * w;
    let lv = logits.values();
    let mv = labels.values();

    let mut n_valid = 0usize;
    for (i, &lab) in mv.iter().enumerate() {
        if lab == IGNORE_INDEX {
            continue;
        }
        if usize::from(lab) >= c {
            let (ni, py) = (i / plane, i % plane);
            return Err(Error::data(format!(
                "label {lab} at sample {ni}, pixel {py} outside label space of {c} classes"
            )));
        }
        n_valid += 1;
    }

    let mut dlogits = Tensor::zeros(lshape);
    if n_valid == 0 {
        return Ok((0.0, dlogits));
    }
    let inv = 1.0 / n_valid as f64;

    let mut loss_sum = 0.0;
    let dv = dlogits.values_mut();
    for ni in 0..n {
        for p in 0..plane {
            let lab = mv[ni * plane + p];
            if lab == IGNORE_INDEX {
                continue;
            }
            let base = ni * c * plane + p;
            // Numerically stable log-sum-exp over the class axis.
            let mut maxz = f64::NEG_INFINITY;
            for ci in 0..c {
                maxz = maxz.max(lv[base + ci * plane]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                sum += (lv[base + ci * plane] - maxz).exp();
            }
            let lse = maxz + sum.ln();
            loss_sum += lse - lv[base + usize::from(lab) * plane];
            let inv_sum = 1.0 / sum;
            for ci in 0..c {
                let p_ci = (lv[base + ci * plane] - maxz).exp() * inv_sum;
                let target = if ci == usize::from(lab) { 1.0 } else { 0.0 };
                dv[base + ci * plane] = (p_ci - target) * inv;
            }
        }
    }
    let loss = loss_sum * inv;
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy loss is not finite"));
    }
    Ok((loss, dlogits))
}

/// An ordered collection of named tensors (model parameters or gradients).
///
/// Iteration order is registration order, which makes serialized parameter
/// sets and update loops deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Add a named tensor; duplicate names are a configuration error.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// A parameter set with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::config("parameter sets have different structures"));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (av, bv) in a.values_mut().iter_mut().zip(b.values()) {
                *av += scale * bv;
            }
        }
        Ok(())
    }

    /// Multiply every value by a constant.
    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.entries.iter_mut() {
            for v in t.values_mut() {
                *v *= s;
            }
        }
    }

    /// True when every value in every tensor is finite.
    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Largest absolute element-wise difference across all entries.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if !self.same_structure(other) {
            return Err(Error::config("parameter sets have different structures"));
        }
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    /// Round every tensor through f32 (single-precision emulation).
    pub fn round_to_single(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.round_to_single();
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// One plain SGD step: `params -= lr * grads`.
///
/// The update is atomic: if the gradient set has a different structure
/// (configuration error) or contains non-finite values (numeric failure),
/// the parameters are left untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !params.same_structure(grads) {
        return Err(Error::config(
            "sgd_step: gradient structure does not match parameters",
        ));
    }
    if !lr.is_finite() {
        return Err(Error::numeric(format!(
            "sgd_step: learning rate {lr} is not finite"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::numeric(
            "sgd_step: gradients contain non-finite values",
        ));
    }
    params.add_scaled(grads, -lr)
}

/// Largest relative error between analytic and central-finite-difference
/// gradients of `loss` at `params`.
///
/// The loss closure must be a pure function of the parameters. Up to
/// `max_coords` coordinates are probed (all of them when the parameter set
/// is small enough), selected deterministically from `seed`. The relative
/// error at a coordinate is `|a - n| / max(1e-8, |a| + |n|)` for analytic
/// `a` and numeric `n`.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !params.same_structure(analytic) {
        return Err(Error::config(
            "finite_diff_check: analytic gradient structure does not match parameters",
        ));
    }
    let total = params.total_values();
    if total == 0 {
        return Ok(0.0);
    }
    let coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = rng_for(seed, Stream::FiniteDiff, 0);
        let mut picked = rand::seq::index::sample(&mut rng, total, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    // Map flat coordinates onto (entry, offset) pairs.
    let mut spans = Vec::new();
    let mut start = 0usize;
    for (name, t) in params.iter() {
        spans.push((name.to_string(), start, t.len()));
        start += t.len();
    }

    let mut worst = 0.0f64;
    let mut work = params.clone();
    for flat in coords {
        let (name, offset) = spans
            .iter()
            .find(|(_, s, l)| flat >= *s && flat < s + l)
            .map(|(n, s, _)| (n.clone(), flat - s))
            .expect("flat coordinate within bounds");
        let orig = work.get(&name).unwrap().values()[offset];

        work.get_mut(&name).unwrap().values_mut()[offset] = orig + eps;
        let up = loss(&work)?;
        work.get_mut(&name).unwrap().values_mut()[offset] = orig - eps;
        let down = loss(&work)?;
        work.get_mut(&name).unwrap().values_mut()[offset] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(&name).unwrap().values()[offset];
        if !numeric.is_finite() {
            return Err(Error::numeric(format!(
                "finite difference at {name}[{offset}] is not finite"
            )));
        }
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct six-loop definition of same-padded convolution, kept as an
    /// independent oracle for the production kernel.
    fn conv2d_naive(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (n, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (o, k) = (kernel.shape()[0], kernel.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, o, h, w]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias.values()[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = x as isize + kx as isize - pad;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let iv = input.values()
                                        [((ni * c + ci) * h + sy as usize) * w + sx as usize];
                                    let kv = kernel.values()[((oi * c + ci) * k + ky) * k + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out.values_mut()[((ni * o + oi) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, Stream::FiniteDiff, 99);
        let mut t = Tensor::zeros(shape);
        for v in t.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = random_tensor(&[1, 1, 4, 4], 1);
        let kernel = Tensor::from_values(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_bias_only_on_zero_input() {
        let input = Tensor::zeros(&[2, 3, 5, 5]);
        let kernel = random_tensor(&[4, 3, 3, 3], 2);
        let bias = Tensor::from_values(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = conv2d(&input, &kernel, &bias).unwrap();
        for ni in 0..2 {
            for oi in 0..4 {
                for p in 0..25 {
                    assert_eq!(out.values()[(ni * 4 + oi) * 25 + p], bias.values()[oi]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for (seed, (n, c, h, w, o, k)) in [
            (10, (1, 2, 5, 5, 3, 3)),
            (11, (2, 3, 7, 4, 2, 3)),
            (12, (1, 1, 6, 6, 1, 5)),
            (13, (3, 4, 3, 3, 5, 1)),
        ] {
            let input = random_tensor(&[n, c, h, w], seed);
            let kernel = random_tensor(&[o, c, k, k], seed + 100);
            let bias = random_tensor(&[o], seed + 200);
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv2d_naive(&input, &kernel, &bias);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_matches_naive_oracle_random_shapes(
            seed in 0u64..1000,
            n in 1usize..3,
            c in 1usize..4,
            h in 1usize..8,
            w in 1usize..8,
            o in 1usize..4,
            kidx in 0usize..3,
        ) {
            let k = [1, 3, 5][kidx];
            let input = random_tensor(&[n, c, h, w], seed);
            let kernel = random_tensor(&[o, c, k, k], seed + 7919);
            let bias = random_tensor(&[o], seed + 15838);
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv2d_naive(&input, &kernel, &bias);
            prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_even_or_rectangular_kernels() {
        let input = Tensor::zeros(&[1, 1, 4, 4]);
        let bias = Tensor::zeros(&[1]);
        let even = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&input, &even, &bias),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let input = random_tensor(&[2, 2, 5, 4], 21);
        let kernel = random_tensor(&[3, 2, 3, 3], 22);
        let bias = random_tensor(&[3], 23);
        // Scalar loss: dot product of the output with a fixed random
        // weighting, so every output element has a distinct gradient.
        let weights = random_tensor(&[2, 3, 5, 4], 24);

        // loss = sum(out * weights), so the upstream gradient is `weights`.
        let (din, dker, dbias) = conv2d_backward(&input, &kernel, &weights).unwrap();

        let mut params = ParamSet::new();
        params.register("input", input.clone()).unwrap();
        params.register("kernel", kernel.clone()).unwrap();
        params.register("bias", bias.clone()).unwrap();
        let mut analytic = ParamSet::new();
        analytic.register("input", din).unwrap();
        analytic.register("kernel", dker).unwrap();
        analytic.register("bias", dbias).unwrap();

        let dout = weights.clone();
        let worst = finite_diff_check(
            move |p| {
                let out = conv2d(
                    p.get("input").unwrap(),
                    p.get("kernel").unwrap(),
                    p.get("bias").unwrap(),
                )?;
                Ok(out
                    .values()
                    .iter()
                    .zip(dout.values())
                    .map(|(a, b)| a * b)
                    .sum())
            },
            &params,
            &analytic,
            1e-5,
            160,
            77,
        )
        .unwrap();
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn relu_clamps_negatives_and_keeps_positives() {
        let x = Tensor::from_values(&[1, 1, 1, 4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.values(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn relu_backward_blocks_gradient_at_and_below_zero() {
        let x = Tensor::from_values(&[1, 1, 1, 4], vec![-1.0, 0.0, 2.0, 5.0]).unwrap();
        let dy = Tensor::filled(&[1, 1, 1, 4], 1.5);
        let dx = relu_backward(&x, &dy).unwrap();
        assert_eq!(dx.values(), &[0.0, 0.0, 1.5, 1.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        for c in [2usize, 8, 19] {
            let logits = Tensor::filled(&[1, c, 2, 2], 0.37);
            let labels = MaskTensor::filled(&[1, 2, 2], 0);
            let (loss, _) = masked_softmax_cross_entropy(&logits, &labels).unwrap();
            assert_abs_diff_eq!(loss, (c as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_two_class_closed_form() {
        let logits = Tensor::from_values(&[1, 2, 1, 1], vec![2.0, 0.0]).unwrap();
        let labels = MaskTensor::filled(&[1, 1, 1], 0);
        let (loss, dlogits) = masked_softmax_cross_entropy(&logits, &labels).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert_abs_diff_eq!(loss, (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(dlogits.values()[0], p0 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dlogits.values()[1], 1.0 - p0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_marked_pixels_exactly() {
        let logits_a = random_tensor(&[1, 3, 2, 2], 31);
        let logits_b = {
            let mut t = logits_a.clone();
            // Perturb logits only at pixel 0, which is ignored below.
            for ci in 0..3 {
                t.values_mut()[ci * 4] += 100.0;
            }
            t
        };
        let labels = MaskTensor::from_values(&[1, 2, 2], vec![IGNORE_INDEX, 0, 2, 1]).unwrap();
        let (la, da) = masked_softmax_cross_entropy(&logits_a, &labels).unwrap();
        let (lb, db) = masked_softmax_cross_entropy(&logits_b, &labels).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(da, db);
        // The ignored pixel's gradient is exactly zero.
        for ci in 0..3 {
            assert_eq!(da.values()[ci * 4], 0.0);
        }
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let logits = random_tensor(&[2, 4, 3, 3], 32);
        let labels = MaskTensor::filled(&[2, 3, 3], IGNORE_INDEX);
        let (loss, dlogits) = masked_softmax_cross_entropy(&logits, &labels).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dlogits.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 8, 1, 1]);
        let labels = MaskTensor::filled(&[1, 1, 1], 9);
        assert!(matches!(
            masked_softmax_cross_entropy(&logits, &labels),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = random_tensor(&[2, 5, 3, 3], 33);
        let labels = MaskTensor::from_values(
            &[2, 3, 3],
            vec![
                0,
                1,
                2,
                IGNORE_INDEX,
                4,
                3,
                0,
                IGNORE_INDEX,
                2, //
                1,
                1,
                0,
                4,
                IGNORE_INDEX,
                2,
                3,
                0,
                1,
            ],
        )
        .unwrap();
        let (_, dlogits) = masked_softmax_cross_entropy(&logits, &labels).unwrap();

        let mut params = ParamSet::new();
        params.register("logits", logits).unwrap();
        let mut analytic = ParamSet::new();
        analytic.register("logits", dlogits).unwrap();
        let labels2 = labels.clone();
        let worst = finite_diff_check(
            move |p| {
                let (l, _) = masked_softmax_cross_entropy(p.get("logits").unwrap(), &labels2)?;
                Ok(l)
            },
            &params,
            &analytic,
            1e-6,
            90,
            88,
        )
        .unwrap();
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn cross_entropy_is_mean_over_valid_pixels() {
        // Duplicating the batch must leave the mean loss unchanged.
        let logits = random_tensor(&[1, 3, 2, 2], 34);
        let labels = MaskTensor::from_values(&[1, 2, 2], vec![0, 1, IGNORE_INDEX, 2]).unwrap();
        let (l1, _) = masked_softmax_cross_entropy(&logits, &labels).unwrap();

        let mut doubled = Tensor::zeros(&[2, 3, 2, 2]);
        doubled.values_mut()[..12].copy_from_slice(logits.values());
        doubled.values_mut()[12..].copy_from_slice(logits.values());
        let mut dl = labels.values().to_vec();
        dl.extend_from_slice(labels.values());
        let labels2 = MaskTensor::from_values(&[2, 2, 2], dl).unwrap();
        let (l2, _) = masked_softmax_cross_entropy(&doubled, &labels2).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn sgd_step_basic_update() {
        let mut params = ParamSet::new();
        params
            .register("w", Tensor::from_values(&[2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let mut grads = ParamSet::new();
        grads
            .register("w", Tensor::from_values(&[2], vec![0.5, 1.0]).unwrap())
            .unwrap();
        sgd_step(&mut params, &grads, 0.1).unwrap();
        assert_abs_diff_eq!(params.get("w").unwrap().values()[0], 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(params.get("w").unwrap().values()[1], -2.1, epsilon = 1e-15);
    }

    #[test]
    fn sgd_step_zero_lr_is_identity() {
        let mut params = ParamSet::new();
        params.register("w", random_tensor(&[7], 41)).unwrap();
        let before = params.clone();
        let mut grads = ParamSet::new();
        grads.register("w", random_tensor(&[7], 42)).unwrap();
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_step_quadratic_decay_closed_form() {
        // For loss w^2/2 the gradient is w, so each step multiplies the
        // weight by (1 - lr); ten steps at lr 0.1 land on 0.9^10.
        let mut params = ParamSet::new();
        params
            .register("w", Tensor::from_values(&[1], vec![1.0]).unwrap())
            .unwrap();
        for _ in 0..10 {
            let grads = params.clone();
            sgd_step(&mut params, &grads, 0.1).unwrap();
        }
        assert_abs_diff_eq!(
            params.get("w").unwrap().values()[0],
            0.9f64.powi(10),
            epsilon = 1e-14
        );
    }

    #[test]
    fn sgd_step_rejects_non_finite_gradients_without_mutating() {
        let mut params = ParamSet::new();
        params.register("w", random_tensor(&[3], 43)).unwrap();
        let before = params.clone();
        let mut grads = ParamSet::new();
        grads
            .register(
                "w",
                Tensor::from_values(&[3], vec![0.0, f64::NAN, 1.0]).unwrap(),
            )
            .unwrap();
        assert!(matches!(
            sgd_step(&mut params, &grads, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_step_rejects_structure_mismatch() {
        let mut params = ParamSet::new();
        params.register("w", Tensor::zeros(&[3])).unwrap();
        let mut grads = ParamSet::new();
        grads.register("w", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(
            sgd_step(&mut params, &grads, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finite_diff_accepts_exact_linear_gradient() {
        let mut params = ParamSet::new();
        params.register("w", random_tensor(&[10], 51)).unwrap();
        let coef = random_tensor(&[10], 52);
        let mut analytic = ParamSet::new();
        analytic.register("w", coef.clone()).unwrap();
        let worst = finite_diff_check(
            move |p| {
                Ok(p.get("w")
                    .unwrap()
                    .values()
                    .iter()
                    .zip(coef.values())
                    .map(|(a, b)| a * b)
                    .sum())
            },
            &params,
            &analytic,
            1e-5,
            100,
            53,
        )
        .unwrap();
        assert!(worst < 1e-9, "worst relative error {worst}");
    }

    #[test]
    fn finite_diff_flags_corrupted_gradient() {
        let mut params = ParamSet::new();
        params.register("w", random_tensor(&[10], 54)).unwrap();
        let coef = random_tensor(&[10], 55);
        let mut corrupted = ParamSet::new();
        let mut wrong = coef.clone();
        wrong.values_mut()[3] += 1.0;
        corrupted.register("w", wrong).unwrap();
        let worst = finite_diff_check(
            move |p| {
                Ok(p.get("w")
                    .unwrap()
                    .values()
                    .iter()
                    .zip(coef.values())
                    .map(|(a, b)| a * b)
                    .sum())
            },
            &params,
            &corrupted,
            1e-5,
            100,
            56,
        )
        .unwrap();
        assert!(worst > 0.05, "corruption not detected: {worst}");
    }

    #[test]
    fn round_to_single_is_idempotent() {
        let mut t = random_tensor(&[32], 61);
        t.round_to_single();
        let once = t.clone();
        t.round_to_single();
        assert_eq!(t, once);
        assert!(t.values().iter().all(|v| *v == (*v as f32 as f64)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cross_entropy_invariant_to_ignored_logits(seed in 0u64..500, bump in -50.0f64..50.0) {
            let logits = random_tensor(&[1, 4, 2, 3], seed);
            let labels = MaskTensor::from_values(
                &[1, 2, 3],
                vec![0, IGNORE_INDEX, 3, 1, IGNORE_INDEX, 2],
            ).unwrap();
            let mut bumped = logits.clone();
            for ci in 0..4 {
                bumped.values_mut()[ci * 6 + 1] += bump;
                bumped.values_mut()[ci * 6 + 4] += bump;
            }
            let (la, da) = masked_softmax_cross_entropy(&logits, &labels).unwrap();
            let (lb, db) = masked_softmax_cross_entropy(&bumped, &labels).unwrap();
            prop_assert_eq!(la.to_bits(), lb.to_bits());
            prop_assert_eq!(da, db);
        }
    }
}

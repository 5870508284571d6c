//! Hand-differentiated layer primitives.
//!
//! Each forward op has a matching backward op. Spatial tensors are laid out
//! `[C, H, W]` per image and `[B, C, H, W]` per batch.

use crate::error::{FerError, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Batch-norm epsilon added to the variance.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old value in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients returned by a backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    /// Parameter gradients keyed by parameter name, same shapes as the parameters.
    pub params: Vec<(&'static str, Tensor<T>)>,
    /// Gradient with respect to the layer input.
    pub input: Tensor<T>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }
}

fn chw(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(FerError::shape(format!(
            "{what}: expected [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = chw(input, "conv2d input")?;
    let (c_out, kc_in, k) = match *kernels.shape() {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => {
            return Err(FerError::shape(format!(
                "conv2d kernels: expected [C_out, C_in, K, K], got {:?}",
                kernels.shape()
            )))
        }
    };
    if kc_in != c_in {
        return Err(FerError::shape(format!(
            "conv2d: input has {c_in} channels but kernels expect {kc_in}"
        )));
    }
    if k % 2 == 0 {
        return Err(FerError::shape(format!("conv2d: kernel size {k} is not odd")));
    }
    Ok((c_in, h, w, c_out, k))
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(len);
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Stride-1 "same" convolution with zero padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out, k) = conv_dims(input, kernels)?;
    bias.expect_shape(&[c_out])?;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    conv2d_forward_raw(
        input.data(),
        (c_in, h, w),
        kernels.data(),
        c_out,
        k,
        bias.data(),
        out.data_mut(),
    );
    Ok(out)
}

pub(crate) fn conv2d_forward_raw<T: Scalar>(
    input: &[T],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[T],
    c_out: usize,
    k: usize,
    bias: &[T],
    out: &mut [T],
) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            let kbase = (co * c_in + ci) * k * k;
            for ki in 0..k {
                let dy = ki as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kj in 0..k {
                    let dx = kj as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let wv = kernels[kbase + ki * k + kj];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a = *a + wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]: `"kernels"`, `"bias"` and the input.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (c_in, h, w, c_out, k) = conv_dims(input, kernels)?;
    upstream.expect_shape(&[c_out, h, w])?;
    let mut dk = Tensor::zeros(kernels.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = Tensor::zeros(input.shape());
    conv2d_backward_raw(
        input.data(),
        (c_in, h, w),
        kernels.data(),
        c_out,
        k,
        upstream.data(),
        dk.data_mut(),
        db.data_mut(),
        Some(dx.data_mut()),
    );
    Ok(LayerGrads {
        params: vec![("kernels", dk), ("bias", db)],
        input: dx,
    })
}

/// Accumulates (`+=`) kernel and bias gradients; writes the input gradient if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_raw<T: Scalar>(
    input: &[T],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[T],
    c_out: usize,
    k: usize,
    upstream: &[T],
    dk: &mut [T],
    db: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    if let Some(dx) = dinput.as_deref_mut() {
        dx.fill(T::zero());
    }
    for co in 0..c_out {
        let up = &upstream[co * plane..(co + 1) * plane];
        db[co] = db[co] + up.iter().copied().sum();
        for ci in 0..c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            let kbase = (co * c_in + ci) * k * k;
            for ki in 0..k {
                let dy = ki as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kj in 0..k {
                    let dx = kj as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let n = x1 - x0;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let urow = &up[y * w + x0..y * w + x1];
                        let irow = &src[sy * w + sx0..sy * w + sx0 + n];
                        for (&a, &b) in urow.iter().zip(irow) {
                            acc = acc + a * b;
                        }
                    }
                    let idx = kbase + ki * k + kj;
                    dk[idx] = dk[idx] + acc;

                    if let Some(dxs) = dinput.as_deref_mut() {
                        let wv = kernels[idx];
                        let dplane = &mut dxs[ci * plane..(ci + 1) * plane];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let urow = &up[y * w + x0..y * w + x1];
                            let drow = &mut dplane[sy * w + sx0..sy * w + sx0 + n];
                            for (d, &u) in drow.iter_mut().zip(urow) {
                                *d = *d + wv * u;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Argmax positions recorded by [`maxpool2x2_forward`].
#[derive(Debug, Clone)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    /// Flat index into the input for every output element.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = chw(input, "maxpool input")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(FerError::shape(format!(
            "maxpool: input {h}x{w} too small for a 2x2 window"
        )));
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[(ch * oh + oy) * ow + ox] = src[best];
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<T: Scalar>(
    indices: &PoolIndices,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.len() != indices.argmax.len() {
        return Err(FerError::shape(format!(
            "maxpool backward: upstream has {} elements, forward produced {}",
            upstream.len(),
            indices.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&indices.input_shape);
    let len = dx.len();
    let d = dx.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(upstream.data()) {
        if idx >= len {
            return Err(FerError::Internal(format!(
                "maxpool backward: argmax {idx} outside input of {len} elements"
            )));
        }
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// False until the first train-mode batch has been seen.
    pub populated: bool,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
            populated: false,
        }
    }
}

/// Values saved by a train-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

fn bchw(t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(FerError::shape(format!(
            "batch norm: expected [B, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// Per-channel batch normalization. Returns a cache only in train mode.
pub fn batchnorm_forward<T: Scalar>(
    batch: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (b, c, hw) = bchw(batch)?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    stats.mean.expect_shape(&[c])?;
    stats.var.expect_shape(&[c])?;
    let eps = T::from_f64(BN_EPSILON);
    let x = batch.data();
    let mut out = Tensor::zeros(batch.shape());

    match mode {
        Mode::Eval => Ok((batchnorm_eval(batch, gamma, beta, stats)?, None)),
        Mode::Train => {
            let count = b * hw;
            if count < 2 {
                return Err(FerError::shape(
                    "batch norm in train mode needs at least 2 values per channel",
                ));
            }
            let m_t = T::from_f64(count as f64);
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = vec![T::zero(); c];
            let momentum = T::from_f64(BN_MOMENTUM);
            let y = out.data_mut();
            for ch in 0..c {
                let mut sum = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * hw;
                    sum = sum + x[off..off + hw].iter().copied().sum();
                }
                let mean = sum / m_t;
                let mut sq = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * hw;
                    for &v in &x[off..off + hw] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                let var = sq / m_t;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[ch] = inv;
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for n in 0..b {
                    let off = (n * c + ch) * hw;
                    for i in off..off + hw {
                        let h = (x[i] - mean) * inv;
                        xhat[i] = h;
                        y[i] = g * h + bt;
                    }
                }

                let unbiased = sq / T::from_f64((count - 1) as f64);
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = if stats.populated {
                    momentum * *rm + (T::one() - momentum) * mean
                } else {
                    mean
                };
                let rv = &mut stats.var.data_mut()[ch];
                *rv = if stats.populated {
                    momentum * *rv + (T::one() - momentum) * unbiased
                } else {
                    unbiased
                };
            }
            stats.populated = true;
            Ok((
                out,
                Some(BatchNormCache {
                    shape: batch.shape().to_vec(),
                    xhat,
                    inv_std,
                    gamma: gamma.data().to_vec(),
                }),
            ))
        }
    }
}

/// Eval-mode batch norm using the running statistics; never mutates them.
pub fn batchnorm_eval<T: Scalar>(
    batch: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
) -> Result<Tensor<T>> {
    let (b, c, hw) = bchw(batch)?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    if !stats.populated {
        return Err(FerError::config(
            "batch norm in eval mode before running statistics were populated",
        ));
    }
    let eps = T::from_f64(BN_EPSILON);
    let x = batch.data();
    let mut out = Tensor::zeros(batch.shape());
    let y = out.data_mut();
    for ch in 0..c {
        let inv = T::one() / (stats.var.data()[ch] + eps).sqrt();
        let (g, bt, m) = (gamma.data()[ch], beta.data()[ch], stats.mean.data()[ch]);
        for n in 0..b {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                y[i] = g * (x[i] - m) * inv + bt;
            }
        }
    }
    Ok(out)
}

/// Gradients of the train-mode batch-norm formula: `"gamma"`, `"beta"` and the input.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    upstream.expect_shape(&cache.shape)?;
    let (b, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
    let m_t = T::from_f64((b * hw) as f64);
    let dy = upstream.data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(&cache.shape);
    let dxs = dx.data_mut();
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * cache.xhat[i];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let scale = cache.gamma[ch] * cache.inv_std[ch] / m_t;
        for n in 0..b {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                dxs[i] = scale * (m_t * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
    }
    Ok(LayerGrads {
        params: vec![("gamma", dgamma), ("beta", dbeta)],
        input: dx,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `input` is the pre-activation passed to [`relu`].
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(upstream, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// `output` is the value returned by [`sigmoid`].
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(upstream, |y, g| g * y * (T::one() - y))
}

fn dense_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, n_in) = match *input.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(FerError::shape(format!(
                "dense input: expected [B, n_in], got {:?}",
                input.shape()
            )))
        }
    };
    match *weights.shape() {
        [n_out, wi] if wi == n_in => Ok((b, n_in, n_out)),
        _ => Err(FerError::shape(format!(
            "dense: input width {n_in} incompatible with weights {:?}",
            weights.shape()
        ))),
    }
}

/// `out = input · weightsᵀ + bias`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, n_in, n_out) = dense_dims(input, weights)?;
    bias.expect_shape(&[n_out])?;
    let mut out = Tensor::zeros(&[b, n_out]);
    let x = input.data();
    let wt = weights.data();
    let o = out.data_mut();
    for n in 0..b {
        let row = &x[n * n_in..(n + 1) * n_in];
        for j in 0..n_out {
            let wrow = &wt[j * n_in..(j + 1) * n_in];
            let mut acc = bias.data()[j];
            for (&a, &w) in row.iter().zip(wrow) {
                acc = acc + a * w;
            }
            o[n * n_out + j] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`dense_forward`]: `"weights"`, `"bias"` and the input.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (b, n_in, n_out) = dense_dims(input, weights)?;
    upstream.expect_shape(&[b, n_out])?;
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[n_out]);
    let mut dx = Tensor::zeros(input.shape());
    let x = input.data();
    let wt = weights.data();
    let g = upstream.data();
    for n in 0..b {
        let row = &x[n * n_in..(n + 1) * n_in];
        let drow_range = n * n_in..(n + 1) * n_in;
        for j in 0..n_out {
            let gj = g[n * n_out + j];
            if gj == T::zero() {
                continue;
            }
            db.data_mut()[j] = db.data()[j] + gj;
            let dwrow = &mut dw.data_mut()[j * n_in..(j + 1) * n_in];
            for (d, &a) in dwrow.iter_mut().zip(row) {
                *d = *d + gj * a;
            }
            let wrow = &wt[j * n_in..(j + 1) * n_in];
            let drow = &mut dx.data_mut()[drow_range.clone()];
            for (d, &w) in drow.iter_mut().zip(wrow) {
                *d = *d + gj * w;
            }
        }
    }
    Ok(LayerGrads {
        params: vec![("weights", dw), ("bias", db)],
        input: dx,
    })
}

/// Per-element multipliers applied by dropout: `0` or `1/(1-p)`. `None` means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T>(pub Option<Vec<T>>);

/// Inverted dropout.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    p: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(FerError::config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((input.clone(), DropoutMask(None)));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((out, DropoutMask(Some(mask))))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    match &mask.0 {
        None => Ok(upstream.clone()),
        Some(m) if m.len() == upstream.len() => {
            let mut dx = upstream.clone();
            for (v, &s) in dx.data_mut().iter_mut().zip(m) {
                *v = *v * s;
            }
            Ok(dx)
        }
        Some(m) => Err(FerError::shape(format!(
            "dropout backward: mask has {} elements, upstream {}",
            m.len(),
            upstream.len()
        ))),
    }
}

/// Row-wise softmax of `[B, n]` logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2)?;
    let n = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of softmax(logits) against `labels`, with its gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2)?;
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(FerError::input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(FerError::input(format!(
            "label {bad} outside [0, {n})"
        )));
    }
    let bt = T::from_f64(b as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[b, n]);
    let g = grad.data_mut();
    for (i, (row, &label)) in logits.data().chunks(n).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_total = total.ln();
        loss = loss + (log_total - (row[label] - max));
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / total;
            let target = if j == label { T::one() } else { T::zero() };
            g[i * n + j] = (p - target) / bt;
        }
    }
    Ok((loss / bt, grad))
}

//! Layer descriptions and their batched forward/backward kernels.
//!
//! Batched buffers are flat `Vec<f64>` in `[batch, h, w, c]` order (or
//! `[batch, n]` for flat features); the public `*_forward` functions wrap the
//! kernels for single samples or batches held in a [`Tensor`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Per-sample feature extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dims {
    Spatial {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flat(usize),
}

impl Dims {
    pub fn spatial(height: usize, width: usize, channels: usize) -> Self {
        Dims::Spatial {
            height,
            width,
            channels,
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Dims::Spatial {
                height,
                width,
                channels,
            } => height * width * channels,
            Dims::Flat(n) => n,
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        match *self {
            Dims::Spatial {
                height,
                width,
                channels,
            } => vec![height, width, channels],
            Dims::Flat(n) => vec![n],
        }
    }
}

impl core::fmt::Display for Dims {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Dims::Spatial {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
            Dims::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Valid, stride-1 convolution with `filters` kernels of
    /// `height × width × depth`.
    Conv {
        height: usize,
        width: usize,
        depth: usize,
        filters: usize,
    },
    /// Non-overlapping `window × window` max pooling (stride = window).
    MaxPool { window: usize },
    Relu,
    Sigmoid,
    /// Affine map on the flattened input.
    Dense { inputs: usize, outputs: usize },
    /// Two-class softmax head; training pairs it with cross-entropy.
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxOutput => "softmax",
        }
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        match *self {
            LayerSpec::Conv {
                height: kh,
                width: kw,
                depth,
                filters,
            } => {
                let Dims::Spatial {
                    height,
                    width,
                    channels,
                } = input
                else {
                    return Err(Error::invalid(format!(
                        "conv expects a spatial input, got {input}"
                    )));
                };
                if kh == 0 || kw == 0 || filters == 0 || depth == 0 {
                    return Err(Error::invalid("conv extents and filter count must be >= 1"));
                }
                if channels != depth || kh > height || kw > width {
                    return Err(Error::Shape {
                        op: "conv",
                        expected: vec![kh, kw, depth],
                        found: input.to_vec(),
                    });
                }
                Ok(Dims::spatial(height - kh + 1, width - kw + 1, filters))
            }
            LayerSpec::MaxPool { window } => {
                let Dims::Spatial {
                    height,
                    width,
                    channels,
                } = input
                else {
                    return Err(Error::invalid(format!(
                        "maxpool expects a spatial input, got {input}"
                    )));
                };
                if window == 0 || height < window || width < window {
                    return Err(Error::Shape {
                        op: "maxpool",
                        expected: vec![window, window],
                        found: input.to_vec(),
                    });
                }
                Ok(Dims::spatial(height / window, width / window, channels))
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input),
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::invalid("dense widths must be >= 1"));
                }
                if input.size() != inputs {
                    return Err(Error::Shape {
                        op: "dense",
                        expected: vec![inputs],
                        found: input.to_vec(),
                    });
                }
                Ok(Dims::Flat(outputs))
            }
            LayerSpec::SoftmaxOutput => {
                if input.size() != 2 {
                    return Err(Error::Shape {
                        op: "softmax",
                        expected: vec![2],
                        found: input.to_vec(),
                    });
                }
                Ok(Dims::Flat(2))
            }
        }
    }

    /// Weight shape and bias length, for layers that own parameters.
    pub fn param_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv {
                height,
                width,
                depth,
                filters,
            } => Some((vec![height, width, depth, filters], filters)),
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], outputs)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shape()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .unwrap_or(0)
    }

    /// `(fan_in, fan_out)` used for Glorot-uniform initialization.
    pub(crate) fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                height,
                width,
                depth,
                filters,
            } => (height * width * depth, height * width * filters),
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            _ => (0, 0),
        }
    }
}

impl core::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LayerSpec::Conv {
                height,
                width,
                depth,
                filters,
            } => write!(f, "conv {height} {width} {depth} {filters}"),
            LayerSpec::MaxPool { window } => write!(f, "maxpool {window}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            LayerSpec::SoftmaxOutput => f.write_str("softmax"),
        }
    }
}

// ---------------------------------------------------------------------------
// kernels
//
// The `_into` variants overwrite a caller-owned buffer so training loops can
// keep their activations allocated across batches.

/// Spatial extent of a conv input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub kh: usize,
    pub kw: usize,
    pub filters: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }
    pub fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
    pub fn k(&self) -> usize {
        self.kh * self.kw * self.depth
    }
}

/// Below this receptive-field size a plain loop beats packing for GEMM.
const SMALL_K: usize = 8;

/// Unrolls every receptive field into a row of a `rows × k` matrix.
pub(crate) fn im2col_into(x: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let run = g.kw * g.depth;
    cols.clear();
    cols.reserve(g.rows() * g.k());
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for i in 0..g.kh {
                    let src = ((n * g.height + oy + i) * g.width + ox) * g.depth;
                    cols.extend_from_slice(&x[src..src + run]);
                }
            }
        }
    }
}

fn col2im_into(dcols: &[f64], g: &ConvGeom, dx: &mut Vec<f64>) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    let run = g.kw * g.depth;
    dx.clear();
    dx.resize(g.batch * g.height * g.width * g.depth, 0.0);
    let mut rows = dcols.chunks_exact(k);
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = rows.next().expect("one row per output pixel");
                for i in 0..g.kh {
                    let dst = ((n * g.height + oy + i) * g.width + ox) * g.depth;
                    for (d, s) in dx[dst..dst + run].iter_mut().zip(&src[i * run..(i + 1) * run]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Convolution forward; returns the output and the unrolled input.
pub(crate) fn conv_fwd(x: &[f64], g: &ConvGeom, weights: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut cols = Vec::new();
    let mut out = Vec::new();
    im2col_into(x, g, &mut cols);
    conv_fwd_cols_into(&cols, g, weights, bias, &mut out);
    (out, cols)
}

pub(crate) fn conv_fwd_cols_into(cols: &[f64], g: &ConvGeom, weights: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    let (rows, k, f) = (g.rows(), g.k(), g.filters);
    out.clear();
    out.reserve(rows * f);
    if k <= SMALL_K {
        out.resize(rows * f, 0.0);
        for (o, row) in out.chunks_exact_mut(f).zip(cols.chunks_exact(k)) {
            o.copy_from_slice(bias);
            for (&xv, w) in row.iter().zip(weights.chunks_exact(f)) {
                for (a, &wv) in o.iter_mut().zip(w) {
                    *a += xv * wv;
                }
            }
        }
    } else {
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, k, f, MatRef::rows(cols, k), MatRef::rows(weights, f), 1.0, out);
    }
}

pub(crate) struct ParamGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Convolution backward. Writes the input gradient to `dx` when requested,
/// using `dcols` as scratch.
pub(crate) fn conv_bwd(
    dy: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    weights: &[f64],
    dx: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> ParamGrads {
    let (rows, k, f) = (g.rows(), g.k(), g.filters);
    let mut dw = vec![0.0; k * f];
    if k <= SMALL_K {
        for (x, g) in cols.chunks_exact(k).zip(dy.chunks_exact(f)) {
            for (&xv, w) in x.iter().zip(dw.chunks_exact_mut(f)) {
                for (a, &gv) in w.iter_mut().zip(g) {
                    *a += xv * gv;
                }
            }
        }
    } else {
        gemm(k, rows, f, MatRef::transposed(cols, k), MatRef::rows(dy, f), 0.0, &mut dw);
    }
    let db = column_sums(dy, f);
    if let Some((dx, dcols)) = dx {
        dcols.clear();
        dcols.resize(rows * k, 0.0);
        gemm(rows, f, k, MatRef::rows(dy, f), MatRef::transposed(weights, f), 0.0, dcols);
        col2im_into(dcols, g, dx);
    }
    ParamGrads { weights: dw, bias: db }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in m.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

/// Max pooling; `argmax[i]` is the flat input index that produced output `i`.
/// Ties go to the first element of the window in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_fwd_into(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) {
    let (oh, ow) = (h / win, w / win);
    out.clear();
    argmax.clear();
    out.resize(batch * oh * ow * c, f64::NEG_INFINITY);
    argmax.resize(out.len(), usize::MAX);
    for n in 0..batch {
        for oy in 0..oh {
            let dst = (n * oh + oy) * ow * c;
            for i in 0..win {
                for ox in 0..ow {
                    let o = &mut out[dst + ox * c..dst + (ox + 1) * c];
                    let a = &mut argmax[dst + ox * c..dst + (ox + 1) * c];
                    for j in 0..win {
                        let at = ((n * h + oy * win + i) * w + ox * win + j) * c;
                        for ch in 0..c {
                            let v = x[at + ch];
                            if a[ch] == usize::MAX || v > o[ch] {
                                o[ch] = v;
                                a[ch] = at + ch;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn pool_fwd(x: &[f64], batch: usize, h: usize, w: usize, c: usize, win: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::new();
    let mut argmax = Vec::new();
    pool_fwd_into(x, batch, h, w, c, win, &mut out, &mut argmax);
    (out, argmax)
}

pub(crate) fn pool_bwd_into(dy: &[f64], argmax: &[usize], input_len: usize, dx: &mut Vec<f64>) {
    dx.clear();
    dx.resize(input_len, 0.0);
    for (&g, &at) in dy.iter().zip(argmax) {
        dx[at] += g;
    }
}

pub(crate) fn dense_fwd_into(x: &[f64], batch: usize, n: usize, m: usize, weights: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.reserve(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, n, m, MatRef::rows(x, n), MatRef::rows(weights, m), 1.0, out);
}

pub(crate) fn dense_fwd(x: &[f64], batch: usize, n: usize, m: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    dense_fwd_into(x, batch, n, m, weights, bias, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_bwd(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    n: usize,
    m: usize,
    weights: &[f64],
    dx: Option<&mut Vec<f64>>,
) -> ParamGrads {
    let mut dw = vec![0.0; n * m];
    gemm(n, batch, m, MatRef::transposed(x, n), MatRef::rows(dy, m), 0.0, &mut dw);
    let db = column_sums(dy, m);
    if let Some(dx) = dx {
        dx.clear();
        dx.resize(batch * n, 0.0);
        gemm(batch, m, n, MatRef::rows(dy, m), MatRef::transposed(weights, m), 0.0, dx);
    }
    ParamGrads { weights: dw, bias: db }
}

pub(crate) fn relu_into(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
}

/// Gradient through ReLU, using the layer output (`y > 0` iff `x > 0`).
pub(crate) fn relu_bwd_into(dy: &[f64], y: &[f64], dx: &mut Vec<f64>) {
    dx.clear();
    dx.extend(dy.iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }));
}

pub(crate) fn sigmoid_into(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))));
}

pub(crate) fn sigmoid_bwd_into(dy: &[f64], y: &[f64], dx: &mut Vec<f64>) {
    dx.clear();
    dx.extend(dy.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)));
}

/// Row-wise two-class softmax with max subtraction.
pub(crate) fn softmax_into(logits: &[f64], p: &mut Vec<f64>) {
    p.clear();
    for z in logits.chunks_exact(2) {
        let m = z[0].max(z[1]);
        let e0 = libm::exp(z[0] - m);
        let e1 = libm::exp(z[1] - m);
        let s = e0 + e1;
        p.push(e0 / s);
        p.push(e1 / s);
    }
}

pub(crate) fn softmax_fwd(logits: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(logits.len());
    softmax_into(logits, &mut p);
    p
}

/// Mean cross-entropy of two-class logits against integer labels.
pub(crate) fn xent_from_logits(logits: &[f64], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.chunks_exact(2).zip(labels) {
        let m = z[0].max(z[1]);
        let lse = m + libm::log(libm::exp(z[0] - m) + libm::exp(z[1] - m));
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub(crate) fn xent_grad(probs: &[f64], labels: &[usize]) -> Vec<f64> {
    let scale = 1.0 / labels.len() as f64;
    let mut g = probs.to_vec();
    for (row, &y) in g.chunks_exact_mut(2).zip(labels) {
        row[y] -= 1.0;
        row[0] *= scale;
        row[1] *= scale;
    }
    g
}

// ---------------------------------------------------------------------------
// tensor-level operations

/// Splits a rank-3 (single sample) or rank-4 (batched) spatial tensor shape.
fn spatial_batch(op: &'static str, t: &Tensor) -> Result<(bool, usize, usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((false, 1, h, w, c)),
        [n, h, w, c] => Ok((true, n, h, w, c)),
        _ => Err(Error::Shape {
            op,
            expected: vec![0, 0, 0],
            found: t.shape().to_vec(),
        }),
    }
}

fn with_batch(batched: bool, batch: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(rest.len() + 1);
    if batched {
        s.push(batch);
    }
    s.extend_from_slice(rest);
    s
}

fn check_finite(out: Vec<f64>, kind: &'static str) -> Result<Vec<f64>> {
    if super::tensor::all_finite(&out) {
        Ok(out)
    } else {
        Err(Error::NonFinite {
            layer: 0,
            kind,
            pass: crate::error::Pass::Forward,
        })
    }
}

/// Valid, stride-1 convolution of an `h×w×d` input (optionally batched as
/// `n×h×w×d`) with `kh×kw×d×f` weights and an `f`-vector of biases.
pub fn conv_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batched, batch, h, w, d) = spatial_batch("conv", input)?;
    let &[kh, kw, kd, f] = weights.shape() else {
        return Err(Error::Shape {
            op: "conv",
            expected: vec![0, 0, d, 0],
            found: weights.shape().to_vec(),
        });
    };
    if kd != d || kh > h || kw > w {
        return Err(Error::Shape {
            op: "conv",
            expected: input.shape().to_vec(),
            found: weights.shape().to_vec(),
        });
    }
    if bias.shape() != [f] {
        return Err(Error::Shape {
            op: "conv bias",
            expected: vec![f],
            found: bias.shape().to_vec(),
        });
    }
    let g = ConvGeom {
        batch,
        height: h,
        width: w,
        depth: d,
        kh,
        kw,
        filters: f,
    };
    let (out, _) = conv_fwd(input.data(), &g, weights.data(), bias.data());
    let out = check_finite(out, "conv")?;
    Ok(Tensor::from_parts(
        with_batch(batched, batch, &[g.out_h(), g.out_w(), f]),
        out,
    ))
}

/// Result of [`maxpool_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    /// Flat input index of the maximum behind each output element.
    pub argmax: Vec<usize>,
}

pub fn maxpool_forward(input: &Tensor, window: usize) -> Result<Pooled> {
    let (batched, batch, h, w, c) = spatial_batch("maxpool", input)?;
    if window == 0 || h < window || w < window {
        return Err(Error::Shape {
            op: "maxpool",
            expected: vec![window, window],
            found: input.shape().to_vec(),
        });
    }
    let (out, argmax) = pool_fwd(input.data(), batch, h, w, c, window);
    Ok(Pooled {
        output: Tensor::from_parts(with_batch(batched, batch, &[h / window, w / window, c]), out),
        argmax,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(input.len());
    relu_into(input.data(), &mut out);
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(input.len());
    sigmoid_into(input.data(), &mut out);
    Tensor::from_parts(input.shape().to_vec(), out)
}

/// Affine map of a width-`n` vector (or `batch×n` matrix) by `n×m` weights.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[n, m] = weights.shape() else {
        return Err(Error::Shape {
            op: "dense",
            expected: vec![0, 0],
            found: weights.shape().to_vec(),
        });
    };
    let (batched, batch, width) = match *input.shape() {
        [width] => (false, 1, width),
        [batch, width] => (true, batch, width),
        _ => (true, input.shape()[0], input.len() / input.shape()[0]),
    };
    if width != n {
        return Err(Error::Shape {
            op: "dense",
            expected: vec![n],
            found: input.shape().to_vec(),
        });
    }
    if bias.shape() != [m] {
        return Err(Error::Shape {
            op: "dense bias",
            expected: vec![m],
            found: bias.shape().to_vec(),
        });
    }
    let out = check_finite(dense_fwd(input.data(), batch, n, m, weights.data(), bias.data()), "dense")?;
    Ok(Tensor::from_parts(with_batch(batched, batch, &[m]), out))
}

/// Probabilities and mean cross-entropy from [`softmax_xent_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxXent {
    pub probs: Tensor,
    pub loss: f64,
}

/// Two-class softmax of `logits` (`[2]` or `[batch, 2]`) and the mean
/// cross-entropy against integer labels in `{0, 1}`.
pub fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<SoftmaxXent> {
    let batch = match *logits.shape() {
        [2] => 1,
        [b, 2] => b,
        _ => {
            return Err(Error::Shape {
                op: "softmax",
                expected: vec![2],
                found: logits.shape().to_vec(),
            })
        }
    };
    if labels.len() != batch || labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid(format!(
            "softmax: need {batch} labels in {{0, 1}}, got {labels:?}"
        )));
    }
    let probs = check_finite(softmax_fwd(logits.data()), "softmax")?;
    let loss = xent_from_logits(logits.data(), labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: 0,
            kind: "softmax",
            pass: crate::error::Pass::Forward,
        });
    }
    Ok(SoftmaxXent {
        probs: Tensor::from_parts(logits.shape().to_vec(), probs),
        loss,
    })
}

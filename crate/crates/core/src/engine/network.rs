//! Layer sequences, parameter stores and reverse-mode backprop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngExt;

use super::layers::{self, ConvGeom, Dims, LayerSpec};
use super::tensor::{all_finite, Tensor};
use crate::error::Pass;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

/// A validated chain of layers with its per-layer feature extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    /// `dims[0]` is the input extent, `dims[i + 1]` the output of layer `i`.
    dims: Vec<Dims>,
}

impl Sequential {
    pub fn new(input: Dims, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.size() == 0 {
            return Err(Error::invalid("network input extent must be positive"));
        }
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(input);
        for (i, layer) in layers.iter().enumerate() {
            if *layer == LayerSpec::SoftmaxOutput && i + 1 != layers.len() {
                return Err(Error::invalid("softmax output must be the last layer"));
            }
            let next = layer.output_dims(dims[i]).map_err(|e| match e {
                Error::Invalid(msg) => Error::Invalid(format!("layer {i}: {msg}")),
                other => other,
            })?;
            dims.push(next);
        }
        Ok(Sequential { layers, dims })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input(&self) -> Dims {
        self.dims[0]
    }

    pub fn output(&self) -> Dims {
        *self.dims.last().expect("dims is never empty")
    }

    /// Feature extents: the input followed by every layer output.
    pub fn dims(&self) -> &[Dims] {
        &self.dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn param_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.param_shape().is_some()).count()
    }

    fn ends_with_softmax(&self) -> bool {
        self.layers.last() == Some(&LayerSpec::SoftmaxOutput)
    }

    /// Runs layer `index` on a batch, overwriting `out`. Conv layers leave
    /// their unrolled input in `cols`, pools their argmax in `argmax`.
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        index: usize,
        params: Option<&LayerParams>,
        x: &[f64],
        batch: usize,
        out: &mut Vec<f64>,
        cols: &mut Vec<f64>,
        argmax: &mut Vec<usize>,
    ) {
        let input = self.dims[index];
        match self.layers[index] {
            LayerSpec::Conv {
                height: kh,
                width: kw,
                filters,
                ..
            } => {
                let p = params.expect("conv layer has parameters");
                let g = conv_geom(input, batch, kh, kw, filters);
                layers::im2col_into(x, &g, cols);
                layers::conv_fwd_cols_into(cols, &g, p.weights.data(), p.bias.data(), out);
            }
            LayerSpec::MaxPool { window } => {
                let Dims::Spatial {
                    height,
                    width,
                    channels,
                } = input
                else {
                    unreachable!("validated at construction")
                };
                layers::pool_fwd_into(x, batch, height, width, channels, window, out, argmax);
            }
            LayerSpec::Relu => layers::relu_into(x, out),
            LayerSpec::Sigmoid => layers::sigmoid_into(x, out),
            LayerSpec::Dense { inputs, outputs } => {
                let p = params.expect("dense layer has parameters");
                layers::dense_fwd_into(x, batch, inputs, outputs, p.weights.data(), p.bias.data(), out);
            }
            LayerSpec::SoftmaxOutput => layers::softmax_into(x, out),
        }
    }

    /// Forward pass returning only the final activation.
    pub(crate) fn forward(&self, params: &[LayerParams], x: &[f64], batch: usize, offset: usize) -> Result<Vec<f64>> {
        self.forward_range(params, x, batch, offset, 0)
    }

    /// Forward pass over layers `start..`, where `x` is the input of layer
    /// `start` and `params` holds the parameters of those layers only.
    pub(crate) fn forward_range(
        &self,
        params: &[LayerParams],
        x: &[f64],
        batch: usize,
        offset: usize,
        start: usize,
    ) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut cols = Vec::new();
        let mut argmax = Vec::new();
        let mut next_param = 0;
        for i in start..self.layers.len() {
            let p = if self.layers[i].param_shape().is_some() {
                next_param += 1;
                Some(&params[next_param - 1])
            } else {
                None
            };
            self.apply(i, p, &cur, batch, &mut next, &mut cols, &mut argmax);
            check(&next, offset + i, self.layers[i], Pass::Forward)?;
            core::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass keeping every activation; `trace.acts[0]` must already
    /// hold the input batch.
    fn forward_trace(&self, params: &[LayerParams], trace: &mut Trace, batch: usize, offset: usize) -> Result<()> {
        let n = self.layers.len();
        trace.acts.resize_with(n + 1, Vec::new);
        trace.cols.resize_with(n, Vec::new);
        trace.argmax.resize_with(n, Vec::new);
        let mut next_param = 0;
        for i in 0..n {
            let p = if self.layers[i].param_shape().is_some() {
                next_param += 1;
                Some(&params[next_param - 1])
            } else {
                None
            };
            let (done, rest) = trace.acts.split_at_mut(i + 1);
            self.apply(i, p, &done[i], batch, &mut rest[0], &mut trace.cols[i], &mut trace.argmax[i]);
            check(&rest[0], offset + i, self.layers[i], Pass::Forward)?;
        }
        Ok(())
    }

    /// Backward pass from `trace.grad`, which holds the gradient of the last
    /// activation (for a softmax-terminated chain: of the logits). On return
    /// `trace.grad` holds the input gradient if it was requested.
    fn backward(
        &self,
        params: &[LayerParams],
        trace: &mut Trace,
        batch: usize,
        offset: usize,
        need_input_grad: bool,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut grads = Vec::with_capacity(self.param_layers());
        let mut next_param = params.len();
        let top = if self.ends_with_softmax() {
            self.layers.len() - 1
        } else {
            self.layers.len()
        };
        let Trace {
            acts,
            cols,
            argmax,
            grad,
            spare,
            dcols,
        } = trace;
        for i in (0..top).rev() {
            let need_dx = i > 0 || need_input_grad;
            let layer = self.layers[i];
            match layer {
                LayerSpec::Conv {
                    height: kh,
                    width: kw,
                    filters,
                    ..
                } => {
                    next_param -= 1;
                    let p = &params[next_param];
                    let g = conv_geom(self.dims[i], batch, kh, kw, filters);
                    let pg = layers::conv_bwd(grad, &cols[i], &g, p.weights.data(), need_dx.then_some((&mut *spare, &mut *dcols)));
                    check(&pg.weights, offset + i, layer, Pass::Backward)?;
                    check(&pg.bias, offset + i, layer, Pass::Backward)?;
                    grads.push((pg.weights, pg.bias));
                }
                LayerSpec::Dense { inputs, outputs } => {
                    next_param -= 1;
                    let p = &params[next_param];
                    let pg = layers::dense_bwd(grad, &acts[i], batch, inputs, outputs, p.weights.data(), need_dx.then_some(&mut *spare));
                    check(&pg.weights, offset + i, layer, Pass::Backward)?;
                    check(&pg.bias, offset + i, layer, Pass::Backward)?;
                    grads.push((pg.weights, pg.bias));
                }
                LayerSpec::MaxPool { .. } if need_dx => layers::pool_bwd_into(grad, &argmax[i], acts[i].len(), spare),
                LayerSpec::Relu if need_dx => layers::relu_bwd_into(grad, &acts[i + 1], spare),
                LayerSpec::Sigmoid if need_dx => layers::sigmoid_bwd_into(grad, &acts[i + 1], spare),
                LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::Sigmoid => {}
                LayerSpec::SoftmaxOutput => unreachable!("softmax is only allowed last"),
            }
            if !need_dx {
                break;
            }
            check(spare, offset + i, layer, Pass::Backward)?;
            core::mem::swap(grad, spare);
        }
        grads.reverse();
        Ok(grads)
    }
}

fn conv_geom(input: Dims, batch: usize, kh: usize, kw: usize, filters: usize) -> ConvGeom {
    let Dims::Spatial {
        height,
        width,
        channels,
    } = input
    else {
        unreachable!("validated at construction")
    };
    ConvGeom {
        batch,
        height,
        width,
        depth: channels,
        kh,
        kw,
        filters,
    }
}

fn check(values: &[f64], layer: usize, spec: LayerSpec, pass: Pass) -> Result<()> {
    if all_finite(values) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            kind: spec.kind(),
            pass,
        })
    }
}

/// Activations and backward scratch of one layer chain.
#[derive(Default)]
struct Trace {
    acts: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    grad: Vec<f64>,
    spare: Vec<f64>,
    dcols: Vec<f64>,
}

/// Reusable buffers for [`Architecture::backprop_in`]. Keeping one per
/// network across batches avoids reallocating every activation.
#[derive(Default)]
pub struct Workspace {
    traces: Vec<Trace>,
    concat: Vec<f64>,
}

impl core::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("Workspace")
    }
}

/// Classifier-level fusion graph: one convolutional tower per input plane,
/// tower outputs flattened and concatenated into a shared head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TowerNet {
    names: Vec<String>,
    towers: Vec<Sequential>,
    head: Sequential,
}

impl TowerNet {
    /// `names[i]` labels tower `i` and seeds its initialization.
    pub fn new(names: Vec<String>, towers: Vec<Sequential>, head: Sequential) -> Result<Self> {
        if towers.is_empty() || names.len() != towers.len() {
            return Err(Error::invalid("tower net needs one name per tower"));
        }
        let first = towers[0].input();
        for t in &towers {
            match t.input() {
                Dims::Spatial { channels: 1, .. } if t.input() == first => {}
                other => {
                    return Err(Error::Shape {
                        op: "tower input",
                        expected: first.to_vec(),
                        found: other.to_vec(),
                    })
                }
            }
        }
        let width: usize = towers.iter().map(|t| t.output().size()).sum();
        if head.input().size() != width {
            return Err(Error::Shape {
                op: "tower concat",
                expected: vec![width],
                found: head.input().to_vec(),
            });
        }
        if !matches!(
            head.layers().iter().find(|l| l.param_shape().is_some()),
            Some(LayerSpec::Dense { .. })
        ) {
            return Err(Error::invalid("tower head must start with a dense layer"));
        }
        Ok(TowerNet { names, towers, head })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn towers(&self) -> &[Sequential] {
        &self.towers
    }

    pub fn head(&self) -> &Sequential {
        &self.head
    }

    /// Width of the concatenated tower features.
    pub fn concat_width(&self) -> usize {
        self.head.input().size()
    }
}

/// A trainable two-class patch classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Sequential(Sequential),
    Towers(TowerNet),
}

impl Architecture {
    pub fn sequential(seq: Sequential) -> Result<Self> {
        if !seq.ends_with_softmax() {
            return Err(Error::invalid("classifier must end with a softmax output"));
        }
        Ok(Architecture::Sequential(seq))
    }

    pub fn towers(net: TowerNet) -> Result<Self> {
        if !net.head.ends_with_softmax() {
            return Err(Error::invalid("classifier must end with a softmax output"));
        }
        Ok(Architecture::Towers(net))
    }

    /// Per-sample input extent.
    pub fn input_dims(&self) -> Dims {
        match self {
            Architecture::Sequential(s) => s.input(),
            Architecture::Towers(t) => match t.towers[0].input() {
                Dims::Spatial { height, width, .. } => Dims::spatial(height, width, t.towers.len()),
                flat => flat,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|s| s.param_count()).sum()
    }

    /// Sequences in global layer order (towers first, then the head).
    pub fn parts(&self) -> Vec<&Sequential> {
        match self {
            Architecture::Sequential(s) => vec![s],
            Architecture::Towers(t) => t.towers.iter().chain(core::iter::once(&t.head)).collect(),
        }
    }

    /// Every layer with its global index.
    pub fn layers(&self) -> Vec<(usize, LayerSpec)> {
        self.parts()
            .into_iter()
            .flat_map(|s| s.layers().iter().copied())
            .enumerate()
            .collect()
    }

    /// Global indices and specs of the parameterized layers, in storage order.
    pub fn param_layers(&self) -> Vec<(usize, LayerSpec)> {
        self.layers()
            .into_iter()
            .filter(|(_, l)| l.param_shape().is_some())
            .collect()
    }

    /// For each part: (first global layer index, first parameter slot).
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut layer = 0;
        let mut slot = 0;
        self.parts()
            .into_iter()
            .map(|s| {
                let o = (layer, slot);
                layer += s.layers().len();
                slot += s.param_layers();
                o
            })
            .collect()
    }

    /// Glorot-uniform weights and zero biases, drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut entries = Vec::new();
        match self {
            Architecture::Sequential(s) => {
                let mut rng = rng_from_seed(seed);
                push_init(&mut entries, s, 0, &mut rng);
            }
            Architecture::Towers(t) => {
                let offsets = self.offsets();
                let mut tower_rngs: Vec<Rng> = Vec::with_capacity(t.towers.len());
                for (i, tower) in t.towers.iter().enumerate() {
                    let mut rng = rng_from_seed(derive_seed(seed, &t.names[i]));
                    push_init(&mut entries, tower, offsets[i].0, &mut rng);
                    tower_rngs.push(rng);
                }
                // The head's first dense layer draws the rows facing tower `i`
                // from tower `i`'s stream, so reordering towers permutes rows.
                let mut head_rng = rng_from_seed(derive_seed(seed, "head"));
                let head_offset = offsets[t.towers.len()].0;
                let mut first = true;
                for (j, layer) in t.head.layers().iter().enumerate() {
                    let Some((wshape, nb)) = layer.param_shape() else { continue };
                    let weights = if first {
                        first = false;
                        let (fan_in, fan_out) = layer.fans();
                        let a = glorot(fan_in, fan_out);
                        let mut w = Vec::with_capacity(wshape.iter().product());
                        for (tower, rng) in t.towers.iter().zip(tower_rngs.iter_mut()) {
                            let n = tower.output().size() * wshape[1];
                            w.extend((0..n).map(|_| rng.random_range(-a..a)));
                        }
                        w
                    } else {
                        glorot_weights(layer, &mut head_rng)
                    };
                    entries.push(LayerParams {
                        layer: head_offset + j,
                        weights: Tensor::from_parts(wshape, weights),
                        bias: Tensor::from_parts(vec![nb], vec![0.0; nb]),
                    });
                }
            }
        }
        ParamStore::with_params(seed, entries)
    }

    /// All-zero parameters (symmetric outputs everywhere).
    pub fn zero_params(&self) -> ParamStore {
        let entries = self
            .param_layers()
            .into_iter()
            .map(|(layer, spec)| {
                let (w, b) = spec.param_shape().expect("param layer");
                LayerParams {
                    layer,
                    weights: Tensor::zeros(&w),
                    bias: Tensor::zeros(&[b]),
                }
            })
            .collect();
        ParamStore::with_params(0, entries)
    }

    /// Checks that `params` has exactly the shapes this architecture needs.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let layout = self.param_layers();
        if layout.len() != params.params.len() {
            return Err(Error::invalid(format!(
                "parameter store has {} layers, architecture needs {}",
                params.params.len(),
                layout.len()
            )));
        }
        for ((layer, spec), p) in layout.iter().zip(&params.params) {
            let (w, b) = spec.param_shape().expect("param layer");
            if p.layer != *layer || p.weights.shape() != w.as_slice() || p.bias.shape() != [b] {
                return Err(Error::Shape {
                    op: "parameters",
                    expected: w,
                    found: p.weights.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let mut expected = vec![inputs.shape().first().copied().unwrap_or(0)];
        expected.extend(self.input_dims().to_vec());
        if inputs.rank() < 2 || inputs.len() != expected.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "network input",
                expected,
                found: inputs.shape().to_vec(),
            });
        }
        Ok(inputs.shape()[0])
    }

    /// Class probabilities `[batch, 2]` for a batch of inputs.
    pub fn forward(&self, params: &ParamStore, inputs: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(inputs)?;
        let probs = match self {
            Architecture::Sequential(s) => s.forward(&params.params, inputs.data(), batch, 0)?,
            Architecture::Towers(t) => {
                let offsets = self.offsets();
                let k = t.towers.len();
                let mut feats = Vec::with_capacity(k);
                for (i, tower) in t.towers.iter().enumerate() {
                    let plane = split_plane(inputs.data(), k, i);
                    let (lo, hi) = (offsets[i].1, offsets[i].1 + tower.param_layers());
                    feats.push(tower.forward(&params.params[lo..hi], &plane, batch, offsets[i].0)?);
                }
                let concat = concat_rows(&feats, batch);
                let (l0, p0) = offsets[k];
                t.head.forward(&params.params[p0..], &concat, batch, l0)?
            }
        };
        Ok(Tensor::from_parts(vec![batch, 2], probs))
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, params: &ParamStore, batch: &Batch) -> Result<f64> {
        let logits = self.logits(params, &batch.inputs)?;
        let loss = layers::xent_from_logits(&logits, &batch.labels);
        if !loss.is_finite() {
            return Err(self.softmax_non_finite());
        }
        Ok(loss)
    }

    fn softmax_non_finite(&self) -> Error {
        Error::NonFinite {
            layer: self.layers().len() - 1,
            kind: "softmax",
            pass: Pass::Forward,
        }
    }

    fn logits(&self, params: &ParamStore, inputs: &Tensor) -> Result<Vec<f64>> {
        let batch = self.check_input(inputs)?;
        match self {
            Architecture::Sequential(s) => {
                let n = s.layers.len() - 1;
                let pre = Sequential {
                    layers: s.layers[..n].to_vec(),
                    dims: s.dims[..=n].to_vec(),
                };
                pre.forward(&params.params, inputs.data(), batch, 0)
            }
            Architecture::Towers(t) => {
                let offsets = self.offsets();
                let k = t.towers.len();
                let mut feats = Vec::with_capacity(k);
                for (i, tower) in t.towers.iter().enumerate() {
                    let plane = split_plane(inputs.data(), k, i);
                    let (lo, hi) = (offsets[i].1, offsets[i].1 + tower.param_layers());
                    feats.push(tower.forward(&params.params[lo..hi], &plane, batch, offsets[i].0)?);
                }
                let concat = concat_rows(&feats, batch);
                let (l0, p0) = offsets[k];
                let n = t.head.layers.len() - 1;
                let pre = Sequential {
                    layers: t.head.layers[..n].to_vec(),
                    dims: t.head.dims[..=n].to_vec(),
                };
                pre.forward(&params.params[p0..], &concat, batch, l0)
            }
        }
    }

    fn trace_forward(&self, params: &ParamStore, x: &[f64], b: usize, ws: &mut Workspace) -> Result<()> {
        ws.traces.resize_with(self.parts().len(), Trace::default);
        match self {
            Architecture::Sequential(s) => {
                let trace = &mut ws.traces[0];
                trace.acts.resize_with(1, Vec::new);
                trace.acts[0].clear();
                trace.acts[0].extend_from_slice(x);
                s.forward_trace(&params.params, trace, b, 0)
            }
            Architecture::Towers(t) => {
                let offsets = self.offsets();
                let k = t.towers.len();
                for (i, tower) in t.towers.iter().enumerate() {
                    let trace = &mut ws.traces[i];
                    trace.acts.resize_with(1, Vec::new);
                    split_plane_into(x, k, i, &mut trace.acts[0]);
                    let (lo, hi) = (offsets[i].1, offsets[i].1 + tower.param_layers());
                    tower.forward_trace(&params.params[lo..hi], trace, b, offsets[i].0)?;
                }
                let (towers, head) = ws.traces.split_at_mut(k);
                let head_trace = &mut head[0];
                head_trace.acts.resize_with(1, Vec::new);
                let feats: Vec<&[f64]> = towers.iter().map(|tr| tr.acts.last().expect("non-empty").as_slice()).collect();
                concat_rows_into(&feats, b, &mut ws.concat);
                core::mem::swap(&mut head_trace.acts[0], &mut ws.concat);
                let (l0, p0) = offsets[k];
                t.head.forward_trace(&params.params[p0..], head_trace, b, l0)
            }
        }
    }

    /// Which branch every piecewise-linear unit takes on `inputs`: the sign
    /// of each ReLU input and the winning index of each pooling window. Two
    /// parameter settings with equal patterns lie on the same smooth piece of
    /// the loss.
    pub fn activation_pattern(&self, params: &ParamStore, inputs: &Tensor) -> Result<Vec<usize>> {
        let b = self.check_input(inputs)?;
        self.check_params(params)?;
        let mut ws = Workspace::default();
        self.trace_forward(params, inputs.data(), b, &mut ws)?;
        let mut out = Vec::new();
        for (part, trace) in self.parts().into_iter().zip(&ws.traces) {
            for (i, layer) in part.layers().iter().enumerate() {
                match layer {
                    LayerSpec::Relu => out.extend(trace.acts[i].iter().map(|&v| usize::from(v > 0.0))),
                    LayerSpec::MaxPool { .. } => out.extend_from_slice(&trace.argmax[i]),
                    _ => {}
                }
            }
        }
        Ok(out)
    }

    /// Exact gradients of the mean batch cross-entropy, plus the batch's
    /// class probabilities (`[batch, 2]`, row-major).
    pub fn backprop_with_probs(&self, params: &ParamStore, batch: &Batch) -> Result<(GradientRecord, Vec<f64>)> {
        self.backprop_in(params, batch, &mut Workspace::default())
    }

    /// [`Self::backprop_with_probs`] reusing the buffers in `ws`.
    pub fn backprop_in(&self, params: &ParamStore, batch: &Batch, ws: &mut Workspace) -> Result<(GradientRecord, Vec<f64>)> {
        let b = self.check_input(&batch.inputs)?;
        if batch.labels.len() != b {
            return Err(Error::invalid("one label per batch sample required"));
        }
        let layout = self.param_layers();
        self.trace_forward(params, batch.inputs.data(), b, ws)?;
        let (raw, probs, logits) = match self {
            Architecture::Sequential(s) => {
                let trace = &mut ws.traces[0];
                let n = trace.acts.len();
                let probs = trace.acts[n - 1].clone();
                let logits = trace.acts[n - 2].clone();
                trace.grad = layers::xent_grad(&probs, &batch.labels);
                let grads = s.backward(&params.params, trace, b, 0, false)?;
                (grads, probs, logits)
            }
            Architecture::Towers(t) => {
                let offsets = self.offsets();
                let k = t.towers.len();
                let (towers, head) = ws.traces.split_at_mut(k);
                let head_trace = &mut head[0];
                let (l0, p0) = offsets[k];
                let n = head_trace.acts.len();
                let probs = head_trace.acts[n - 1].clone();
                let logits = head_trace.acts[n - 2].clone();
                head_trace.grad = layers::xent_grad(&probs, &batch.labels);
                let head_grads = t.head.backward(&params.params[p0..], head_trace, b, l0, true)?;
                let widths: Vec<usize> = t.towers.iter().map(|s| s.output().size()).collect();
                let total: usize = widths.iter().sum();
                let mut grads = Vec::new();
                let mut at = 0;
                for (i, tower) in t.towers.iter().enumerate() {
                    let trace = &mut towers[i];
                    trace.grad.clear();
                    for row in head_trace.grad.chunks_exact(total) {
                        trace.grad.extend_from_slice(&row[at..at + widths[i]]);
                    }
                    at += widths[i];
                    let (lo, hi) = (offsets[i].1, offsets[i].1 + tower.param_layers());
                    grads.extend(tower.backward(&params.params[lo..hi], trace, b, offsets[i].0, false)?);
                }
                grads.extend(head_grads);
                (grads, probs, logits)
            }
        };
        let loss = layers::xent_from_logits(&logits, &batch.labels);
        if !loss.is_finite() {
            return Err(self.softmax_non_finite());
        }
        let grads = layout
            .into_iter()
            .zip(raw)
            .map(|((layer, spec), (w, bias))| {
                let (wshape, nb) = spec.param_shape().expect("param layer");
                LayerGradient {
                    layer,
                    weights: Tensor::from_parts(wshape, w),
                    bias: Tensor::from_parts(vec![nb], bias),
                }
            })
            .collect();
        Ok((GradientRecord { loss, grads }, probs))
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

fn glorot_weights(layer: &LayerSpec, rng: &mut Rng) -> Vec<f64> {
    let (wshape, _) = layer.param_shape().expect("param layer");
    let (fan_in, fan_out) = layer.fans();
    let a = glorot(fan_in, fan_out);
    (0..wshape.iter().product::<usize>())
        .map(|_| rng.random_range(-a..a))
        .collect()
}

fn push_init(entries: &mut Vec<LayerParams>, seq: &Sequential, offset: usize, rng: &mut Rng) {
    for (j, layer) in seq.layers().iter().enumerate() {
        let Some((wshape, nb)) = layer.param_shape() else { continue };
        let w = glorot_weights(layer, rng);
        entries.push(LayerParams {
            layer: offset + j,
            weights: Tensor::from_parts(wshape, w),
            bias: Tensor::from_parts(vec![nb], vec![0.0; nb]),
        });
    }
}

/// Channel `i` of a channels-last buffer with `k` channels.
pub(crate) fn split_plane(x: &[f64], k: usize, i: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / k);
    split_plane_into(x, k, i, &mut out);
    out
}

pub(crate) fn split_plane_into(x: &[f64], k: usize, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().skip(i).step_by(k).copied());
}

fn concat_rows(parts: &[Vec<f64>], batch: usize) -> Vec<f64> {
    let views: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
    let mut out = Vec::new();
    concat_rows_into(&views, batch, &mut out);
    out
}

fn concat_rows_into(parts: &[&[f64]], batch: usize, out: &mut Vec<f64>) {
    out.clear();
    for b in 0..batch {
        for p in parts {
            let w = p.len() / batch;
            out.extend_from_slice(&p[b * w..(b + 1) * w]);
        }
    }
}

/// A training or evaluation batch: inputs `[batch, h, w, c]` and 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "batch of shape {:?} needs {} labels, got {}",
                inputs.shape(),
                inputs.shape()[0],
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Weights and biases of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Global layer index within the owning architecture.
    pub layer: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameters plus SGD momentum state, keyed by layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    pub(crate) params: Vec<LayerParams>,
    pub(crate) velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ParamStore {
    /// Wraps parameter tensors with zero velocity.
    pub fn with_params(seed: u64, params: Vec<LayerParams>) -> Self {
        let velocity = params
            .iter()
            .map(|p| (vec![0.0; p.weights.len()], vec![0.0; p.bias.len()]))
            .collect();
        ParamStore {
            seed,
            params,
            velocity,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn get(&self, layer: usize) -> Option<&LayerParams> {
        self.params.iter().find(|p| p.layer == layer)
    }

    /// Momentum buffers `(weights, bias)` aligned with [`Self::layers`].
    pub fn velocity(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.velocity
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Exact bitwise equality of parameter values (velocity excluded).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.layer == b.layer
                    && a.weights.shape() == b.weights.shape()
                    && bits_eq(a.weights.data(), b.weights.data())
                    && bits_eq(a.bias.data(), b.bias.data())
            })
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub layer: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients mirroring a [`ParamStore`], plus the batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub loss: f64,
    pub grads: Vec<LayerGradient>,
}

impl GradientRecord {
    pub fn scaled(&self, factor: f64) -> GradientRecord {
        let mut out = self.clone();
        for g in &mut out.grads {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

/// Gradients of the mean cross-entropy of `batch` with respect to every
/// parameter of `arch`.
pub fn backprop(arch: &Architecture, params: &ParamStore, batch: &Batch) -> Result<GradientRecord> {
    arch.check_params(params)?;
    arch.backprop_with_probs(params, batch).map(|(g, _)| g)
}

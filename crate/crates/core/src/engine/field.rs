//! Whole-image evaluation of a patch classifier.
//!
//! Classifying the patch centred on every pixel repeats almost all of the
//! convolutional work between neighbouring patches. Here the convolutional
//! prefix runs once over the padded image; each max-pool splits a feature map
//! into one map per pooling phase (shift-and-stitch), so the local feature
//! window of any patch is a plain slice of the map for its phase. Only the
//! dense head runs per pixel.

use alloc::vec;
use alloc::vec::Vec;

use super::layers::{self, ConvGeom, Dims, LayerSpec};
use super::network::{split_plane, Architecture, LayerParams, ParamStore, Sequential};
use super::tensor::all_finite;
use crate::error::Pass;
use crate::{Error, Result};

const CHUNK: usize = 1024;

/// Padded input for whole-image evaluation: `height + ph - 1` rows and
/// `width + pw - 1` columns (channels-last) for a `ph × pw` patch, positioned
/// so that the patch for output pixel `(r, c)` starts at padded `(r, c)`.
pub(crate) struct PaddedImage<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

struct PhaseMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Feature maps for every sampling phase at the current stride.
struct Field {
    stride: usize,
    channels: usize,
    maps: Vec<PhaseMap>,
}

impl Field {
    fn map(&self, r: usize, c: usize) -> &PhaseMap {
        &self.maps[(r % self.stride) * self.stride + c % self.stride]
    }
}

fn run_prefix(seq: &Sequential, params: &[LayerParams], upto: usize, input: Vec<f64>, rows: usize, cols: usize, offset: usize) -> Result<Field> {
    let mut field = Field {
        stride: 1,
        channels: seq.input().to_vec()[2],
        maps: vec![PhaseMap { rows, cols, data: input }],
    };
    let mut slot = 0;
    let mut cols = Vec::new();
    let mut buf = Vec::new();
    for (i, layer) in seq.layers()[..upto].iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                height: kh,
                width: kw,
                filters,
                ..
            } => {
                let p = &params[slot];
                slot += 1;
                for m in &mut field.maps {
                    if m.rows < kh || m.cols < kw {
                        m.rows = m.rows.saturating_sub(kh - 1);
                        m.cols = m.cols.saturating_sub(kw - 1);
                        m.data.clear();
                        continue;
                    }
                    let g = ConvGeom {
                        batch: 1,
                        height: m.rows,
                        width: m.cols,
                        depth: field.channels,
                        kh,
                        kw,
                        filters,
                    };
                    layers::im2col_into(&m.data, &g, &mut cols);
                    layers::conv_fwd_cols_into(&cols, &g, p.weights.data(), p.bias.data(), &mut buf);
                    core::mem::swap(&mut m.data, &mut buf);
                    m.rows = g.out_h();
                    m.cols = g.out_w();
                }
                field.channels = filters;
            }
            LayerSpec::Relu => field.maps.iter_mut().for_each(|m| m.data.iter_mut().for_each(|v| *v = v.max(0.0))),
            LayerSpec::Sigmoid => {
                for m in &mut field.maps {
                    layers::sigmoid_into(&m.data, &mut buf);
                    core::mem::swap(&mut m.data, &mut buf);
                }
            }
            LayerSpec::MaxPool { window } => field = pool_phases(field, window),
            LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput => unreachable!("prefix is convolutional"),
        }
        if field.maps.iter().any(|m| !all_finite(&m.data)) {
            return Err(Error::NonFinite {
                layer: offset + i,
                kind: layer.kind(),
                pass: Pass::Forward,
            });
        }
    }
    Ok(field)
}

fn pool_phases(field: Field, win: usize) -> Field {
    let s = field.stride;
    let ns = s * win;
    let c = field.channels;
    let mut maps: Vec<Option<PhaseMap>> = (0..ns * ns).map(|_| None).collect();
    for (idx, m) in field.maps.into_iter().enumerate() {
        let (pr, pc) = (idx / s, idx % s);
        for br in 0..win {
            for bc in 0..win {
                let rows = m.rows.saturating_sub(br) / win;
                let cols = m.cols.saturating_sub(bc) / win;
                let mut data = Vec::with_capacity(rows * cols * c);
                for oy in 0..rows {
                    for ox in 0..cols {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut first = true;
                            for i in 0..win {
                                for j in 0..win {
                                    let v = m.data[((br + oy * win + i) * m.cols + bc + ox * win + j) * c + ch];
                                    if first || v > best {
                                        best = v;
                                        first = false;
                                    }
                                }
                            }
                            data.push(best);
                        }
                    }
                }
                maps[(pr + s * br) * ns + pc + s * bc] = Some(PhaseMap { rows, cols, data });
            }
        }
    }
    Field {
        stride: ns,
        channels: c,
        maps: maps.into_iter().map(|m| m.expect("every phase is produced")).collect(),
    }
}

/// Copies the local feature window of pixel `(r, c)` onto `out`.
fn gather(field: &Field, local: Dims, r: usize, c: usize, out: &mut Vec<f64>) {
    let Dims::Spatial { height, width, channels } = local else {
        unreachable!("prefix output is spatial")
    };
    let m = field.map(r, c);
    let (r0, c0) = (r / field.stride, c / field.stride);
    assert!(r0 + height <= m.rows && c0 + width <= m.cols, "feature window out of range");
    for i in 0..height {
        let start = ((r0 + i) * m.cols + c0) * channels;
        out.extend_from_slice(&m.data[start..start + width * channels]);
    }
}

fn prefix_len(seq: &Sequential) -> usize {
    seq.layers()
        .iter()
        .position(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput))
        .unwrap_or(seq.layers().len())
}

fn prefix_params(seq: &Sequential, upto: usize) -> usize {
    seq.layers()[..upto].iter().filter(|l| l.param_shape().is_some()).count()
}

/// Positive-class probability for every output pixel (`height × width`,
/// row-major) of a padded image.
pub(crate) fn predict_field(arch: &Architecture, params: &ParamStore, image: &PaddedImage, height: usize, width: usize) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    let Dims::Spatial { height: ph, width: pw, channels } = arch.input_dims() else {
        return Err(Error::invalid("whole-image prediction needs a spatial input"));
    };
    if image.channels != channels || image.height != height + ph - 1 || image.width != width + pw - 1 {
        return Err(Error::Shape {
            op: "padded image",
            expected: vec![height + ph - 1, width + pw - 1, channels],
            found: vec![image.height, image.width, image.channels],
        });
    }
    let npix = height * width;
    let mut out = Vec::with_capacity(npix);
    match arch {
        Architecture::Sequential(seq) => {
            let upto = prefix_len(seq);
            let np = prefix_params(seq, upto);
            let field = run_prefix(seq, &params.params[..np], upto, image.data.to_vec(), image.height, image.width, 0)?;
            let local = seq.dims()[upto];
            let mut rows = Vec::with_capacity(CHUNK * local.size());
            for start in (0..npix).step_by(CHUNK) {
                let end = (start + CHUNK).min(npix);
                rows.clear();
                for p in start..end {
                    gather(&field, local, p / width, p % width, &mut rows);
                }
                let probs = seq.forward_range(&params.params[np..], &rows, end - start, 0, upto)?;
                out.extend(probs.chunks_exact(2).map(|p| p[1]));
            }
        }
        Architecture::Towers(net) => {
            let k = net.towers().len();
            let mut fields = Vec::with_capacity(k);
            let mut slot = 0;
            let mut layer = 0;
            for (i, tower) in net.towers().iter().enumerate() {
                let n = tower.layers().len();
                let np = prefix_params(tower, n);
                let plane = split_plane(image.data, k, i);
                fields.push((
                    run_prefix(tower, &params.params[slot..slot + np], n, plane, image.height, image.width, layer)?,
                    tower.output(),
                ));
                slot += np;
                layer += n;
            }
            let head = net.head();
            let mut rows = Vec::with_capacity(CHUNK * net.concat_width());
            for start in (0..npix).step_by(CHUNK) {
                let end = (start + CHUNK).min(npix);
                rows.clear();
                for p in start..end {
                    for (field, local) in &fields {
                        gather(field, *local, p / width, p % width, &mut rows);
                    }
                }
                let probs = head.forward(&params.params[slot..], &rows, end - start, layer)?;
                out.extend(probs.chunks_exact(2).map(|p| p[1]));
            }
        }
    }
    Ok(out)
}

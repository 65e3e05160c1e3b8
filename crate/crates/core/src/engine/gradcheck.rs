//! Central finite-difference verification of backprop.

use alloc::vec::Vec;

use rand::seq::index;

use super::network::{backprop, Architecture, Batch, GradientRecord, ParamStore};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

/// Networks with more parameters than this are checked on a seeded subsample.
pub const EXHAUSTIVE_LIMIT: usize = 2000;

/// Minimum entries sampled per layer when subsampling.
const MIN_PER_LAYER: usize = 32;

/// Gradient magnitude below which the error is measured in absolute terms.
pub const ABS_FLOOR: f64 = 1e-4;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub kind: &'static str,
    /// Number of parameter entries compared.
    pub checked: usize,
    /// Entries left out because `x - step` and `x + step` fall on different
    /// pieces of a ReLU or max-pool, where a central difference does not
    /// estimate the derivative.
    pub kinks: usize,
    /// Worst error over the remaining entries.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.layers.iter().map(|l| l.checked).sum()
    }

    pub fn kinks(&self) -> usize {
        self.layers.iter().map(|l| l.kinks).sum()
    }
}

/// Compares backprop against central differences with the given `step`.
pub fn gradcheck(
    arch: &Architecture,
    params: &ParamStore,
    batch: &Batch,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = backprop(arch, params, batch)?;
    gradcheck_against(arch, params, batch, &analytic, step, tolerance)
}

/// Like [`gradcheck`] but with caller-supplied analytic gradients.
pub fn gradcheck_against(
    arch: &Architecture,
    params: &ParamStore,
    batch: &Batch,
    analytic: &GradientRecord,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    arch.check_params(params)?;
    if analytic.grads.len() != params.params.len() {
        return Err(Error::invalid("gradient record does not match parameter store"));
    }
    let total = params.count();
    let mut rng = rng_from_seed(derive_seed(params.seed(), "gradcheck"));
    let kinds = arch.param_layers();
    let mut probe = params.clone();
    let base = arch.activation_pattern(params, &batch.inputs)?;
    let mut layers = Vec::with_capacity(params.params.len());
    for (slot, ((layer, spec), grad)) in kinds.iter().zip(&analytic.grads).enumerate() {
        let nw = params.params[slot].weights.len();
        let n = nw + params.params[slot].bias.len();
        let picks: Vec<usize> = if total <= EXHAUSTIVE_LIMIT {
            (0..n).collect()
        } else {
            let quota = (EXHAUSTIVE_LIMIT * n / total).max(MIN_PER_LAYER).min(n);
            let mut v = index::sample(&mut rng, n, quota).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        let mut kinks = 0;
        for &j in &picks {
            let Some(numeric) = central_difference(arch, &mut probe, batch, &base, slot, j, nw, step)? else {
                kinks += 1;
                continue;
            };
            let a = if j < nw {
                grad.weights.data()[j]
            } else {
                grad.bias.data()[j - nw]
            };
            worst = worst.max(relative_error(a, numeric));
        }
        layers.push(LayerCheck {
            layer: *layer,
            kind: spec.kind(),
            checked: picks.len(),
            kinks,
            max_rel_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        layers,
    })
}

/// `None` when the step crosses a non-differentiable point.
#[allow(clippy::too_many_arguments)]
fn central_difference(
    arch: &Architecture,
    probe: &mut ParamStore,
    batch: &Batch,
    base: &[usize],
    slot: usize,
    j: usize,
    nw: usize,
    step: f64,
) -> Result<Option<f64>> {
    let original = if j < nw {
        probe.params[slot].weights.data()[j]
    } else {
        probe.params[slot].bias.data()[j - nw]
    };
    let mut eval = |v: f64| -> Result<(f64, bool)> {
        set(probe, slot, j, nw, v);
        let loss = arch.loss(probe, batch)?;
        let smooth = arch.activation_pattern(probe, &batch.inputs)? == base;
        Ok((loss, smooth))
    };
    let plus = eval(original + step);
    let minus = eval(original - step);
    set(probe, slot, j, nw, original);
    let ((plus, a), (minus, b)) = (plus?, minus?);
    Ok((a && b).then(|| (plus - minus) / (2.0 * step)))
}

fn set(p: &mut ParamStore, slot: usize, j: usize, nw: usize, value: f64) {
    if j < nw {
        p.params[slot].weights.data_mut()[j] = value;
    } else {
        p.params[slot].bias.data_mut()[j - nw] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Dims, LayerSpec, Sequential, Tensor};
    use alloc::vec;
    use rand::RngExt;

    pub(crate) fn random_batch(seed: u64, dims: Dims, n: usize) -> Batch {
        let mut rng = rng_from_seed(seed);
        let mut shape = vec![n];
        shape.extend(dims.to_vec());
        let len = n * dims.size();
        let x = Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..2usize)).collect();
        Batch::new(x, labels).unwrap()
    }

    fn conv_relu_dense() -> Architecture {
        Architecture::sequential(
            Sequential::new(
                Dims::spatial(6, 6, 2),
                vec![
                    LayerSpec::Conv { height: 2, width: 2, depth: 2, filters: 3 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 75, outputs: 2 },
                    LayerSpec::SoftmaxOutput,
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn conv_relu_dense_matches_finite_differences() {
        let arch = conv_relu_dense();
        for seed in 0..10 {
            let params = arch.init_params(seed);
            let batch = random_batch(seed + 100, Dims::spatial(6, 6, 2), 4);
            let report = gradcheck(&arch, &params, &batch, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn linear_dense_is_nearly_exact() {
        let arch = Architecture::sequential(
            Sequential::new(Dims::Flat(5), vec![LayerSpec::Dense { inputs: 5, outputs: 2 }, LayerSpec::SoftmaxOutput])
                .unwrap(),
        )
        .unwrap();
        let params = arch.init_params(1);
        let batch = random_batch(2, Dims::Flat(5), 6);
        let report = gradcheck(&arch, &params, &batch, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn doubled_gradient_fails() {
        let arch = conv_relu_dense();
        let params = arch.init_params(4);
        let batch = random_batch(5, Dims::spatial(6, 6, 2), 4);
        let wrong = backprop(&arch, &params, &batch).unwrap().scaled(2.0);
        let report = gradcheck_against(&arch, &params, &batch, &wrong, 1e-5, 1e-6).unwrap();
        assert!(!report.passed());
        assert!(report.layers.iter().all(|l| !l.passed));
    }

    #[test]
    fn passing_report_has_every_layer_below_tolerance() {
        let arch = conv_relu_dense();
        let params = arch.init_params(9);
        let batch = random_batch(10, Dims::spatial(6, 6, 2), 3);
        let report = gradcheck(&arch, &params, &batch, 1e-5, 1e-6).unwrap();
        assert!(report.passed());
        assert!(report.layers.iter().all(|l| l.max_rel_error < report.tolerance));
        assert_eq!(report.layers.len(), 2);
    }

    #[test]
    fn relu_at_zero_is_skipped_not_scored() {
        let arch = Architecture::sequential(
            Sequential::new(
                Dims::Flat(2),
                vec![
                    LayerSpec::Dense { inputs: 2, outputs: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 2, outputs: 2 },
                    LayerSpec::SoftmaxOutput,
                ],
            )
            .unwrap(),
        )
        .unwrap();
        let mut params = arch.init_params(3);
        params.params[1].weights.data_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let batch = Batch::new(x, vec![0]).unwrap();
        let report = gradcheck(&arch, &params, &batch, 1e-5, 1e-6).unwrap();
        // Both first-layer biases sit exactly on the ReLU hinge.
        assert_eq!(report.layers[0].kinks, 2);
        assert_eq!(report.layers[1].kinks, 0);
        assert!(report.passed(), "{report:?}");
        let mut probe = params.clone();
        let one_sided = central_difference(&arch, &mut probe, &batch, &[], 0, 4, 4, 1e-5).unwrap();
        assert!(one_sided.is_none());
    }

    #[test]
    fn smooth_networks_have_no_kinks() {
        let arch = conv_relu_dense();
        let params = arch.init_params(9);
        let batch = random_batch(10, Dims::spatial(6, 6, 2), 3);
        let report = gradcheck(&arch, &params, &batch, 1e-5, 1e-6).unwrap();
        assert!(report.kinks() * 100 <= report.checked());
        let sig = Architecture::sequential(
            Sequential::new(
                Dims::Flat(3),
                vec![
                    LayerSpec::Dense { inputs: 3, outputs: 3 },
                    LayerSpec::Sigmoid,
                    LayerSpec::Dense { inputs: 3, outputs: 2 },
                    LayerSpec::SoftmaxOutput,
                ],
            )
            .unwrap(),
        )
        .unwrap();
        let p = sig.init_params(1);
        let r = gradcheck(&sig, &p, &random_batch(2, Dims::Flat(3), 4), 1e-5, 1e-6).unwrap();
        assert_eq!(r.kinks(), 0);
        assert!(r.passed());
    }

    #[test]
    fn rejects_non_positive_step() {
        let arch = conv_relu_dense();
        let params = arch.init_params(9);
        let batch = random_batch(10, Dims::spatial(6, 6, 2), 3);
        assert!(gradcheck(&arch, &params, &batch, 0.0, 1e-6).is_err());
    }
}

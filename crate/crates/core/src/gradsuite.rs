//! Seeded finite-difference checks over every layer kind and every
//! trainable scheme at toy patch sizes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::RngExt;

use crate::engine::{gradcheck, Architecture, Batch, Dims, GradCheckReport, LayerSpec, ParamStore, Sequential, Tensor};
use crate::fusion::{single_at, type1_at, type2_at, BaseConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::Result;

pub const SIDE: usize = 8;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Largest share of entries that may be skipped as kink crossings before
/// the suite counts as failed.
pub const KINK_FRACTION: f64 = 0.01;
const BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub instance: usize,
    pub report: GradCheckReport,
}

/// Every case within tolerance, with kink skips inside [`KINK_FRACTION`].
pub fn passed(cases: &[SuiteCase]) -> bool {
    let checked: usize = cases.iter().map(|c| c.report.checked()).sum();
    let kinks: usize = cases.iter().map(|c| c.report.kinks()).sum();
    cases.iter().all(|c| c.report.passed()) && (kinks as f64) <= KINK_FRACTION * checked as f64
}

fn toy_config() -> BaseConfig {
    BaseConfig {
        conv1_filters: 3,
        conv2_filters: 4,
        dense_width: 5,
        ..BaseConfig::default()
    }
}

fn seq(input: Dims, layers: Vec<LayerSpec>) -> Result<Architecture> {
    Architecture::sequential(Sequential::new(input, layers)?)
}

/// Named toy architectures, one per layer kind plus one per scheme.
pub fn cases() -> Result<Vec<(String, Architecture)>> {
    let conv = LayerSpec::Conv {
        height: 2,
        width: 2,
        depth: 2,
        filters: 3,
    };
    let img = Dims::spatial(SIDE, SIDE, 2);
    let cfg = toy_config();
    let names: Vec<String> = ["PET", "CT", "T2"].iter().map(|s| s.to_string()).collect();
    Ok(vec![
        ("conv".into(), seq(img, vec![conv, LayerSpec::Dense { inputs: 147, outputs: 2 }, LayerSpec::SoftmaxOutput])?),
        (
            "maxpool".into(),
            seq(
                img,
                vec![
                    conv,
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Dense { inputs: 27, outputs: 2 },
                    LayerSpec::SoftmaxOutput,
                ],
            )?,
        ),
        (
            "relu".into(),
            seq(
                img,
                vec![conv, LayerSpec::Relu, LayerSpec::Dense { inputs: 147, outputs: 2 }, LayerSpec::SoftmaxOutput],
            )?,
        ),
        (
            "sigmoid".into(),
            seq(
                Dims::Flat(6),
                vec![
                    LayerSpec::Dense { inputs: 6, outputs: 4 },
                    LayerSpec::Sigmoid,
                    LayerSpec::Dense { inputs: 4, outputs: 2 },
                    LayerSpec::SoftmaxOutput,
                ],
            )?,
        ),
        (
            "dense".into(),
            seq(Dims::Flat(6), vec![LayerSpec::Dense { inputs: 6, outputs: 2 }, LayerSpec::SoftmaxOutput])?,
        ),
        ("type1".into(), Architecture::sequential(type1_at(3, &cfg, SIDE)?)?),
        ("type2".into(), Architecture::towers(type2_at(&names, &cfg, SIDE)?)?),
        ("single".into(), Architecture::sequential(single_at(&cfg, SIDE)?)?),
    ])
}

fn random_batch(seed: u64, dims: Dims) -> Result<Batch> {
    let mut rng = rng_from_seed(seed);
    let mut shape = vec![BATCH];
    shape.extend(dims.to_vec());
    let x = (0..BATCH * dims.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..BATCH).map(|_| rng.random_range(0..2usize)).collect();
    Batch::new(Tensor::new(shape, x)?, labels)
}

/// Initial weights with random biases. Zero biases put pre-activations
/// exactly on the ReLU corner whenever a unit's inputs are all zero.
fn random_params(arch: &Architecture, seed: u64) -> ParamStore {
    let mut p = arch.init_params(seed);
    let mut rng = rng_from_seed(derive_seed(seed, "bias"));
    for layer in p.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    p
}

/// Runs `instances` seeded random instances of every case.
pub fn run(seed: u64, instances: usize) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for (name, arch) in cases()? {
        for i in 0..instances {
            let s = derive_seed(seed, &format!("{name}/{i}"));
            let params = random_params(&arch, s);
            let batch = random_batch(derive_seed(s, "batch"), arch.input_dims())?;
            let report = gradcheck(&arch, &params, &batch, STEP, TOLERANCE)?;
            out.push(SuiteCase {
                name: name.clone(),
                instance: i,
                report,
            });
        }
    }
    Ok(out)
}

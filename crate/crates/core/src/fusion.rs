//! Fusion network builders and the shared training loop.
//!
//! * Type-I stacks the modality planes as channels of one input tensor, so the
//!   first 2×2×k convolution mixes them immediately.
//! * Type-II gives every modality its own convolutional tower and feeds the
//!   concatenated tower features to one classifier; trained end-to-end.
//! * Type-III trains one single-modality network per modality; their
//!   labelmaps are merged by majority vote at inference time.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;

use crate::data::{Label, PatchSample, PATCH_SIZE};
use crate::engine::network::split_plane;
use crate::engine::{Architecture, Batch, Dims, LayerSpec, ParamStore, Sequential, Tensor, TowerNet, Workspace};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{engine, Error, Result};

/// Hyper-parameters shared by every scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub dense_width: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            conv1_filters: 16,
            conv2_filters: 32,
            dense_width: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("conv1_filters", self.conv1_filters),
            ("conv2_filters", self.conv2_filters),
            ("dense_width", self.dense_width),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    Type1,
    Type2,
    Type3,
    Single,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Type1 => "type1",
            SchemeKind::Type2 => "type2",
            SchemeKind::Type3 => "type3",
            SchemeKind::Single => "single",
        }
    }
}

impl core::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "type1" | "type-i" | "1" => Ok(SchemeKind::Type1),
            "type2" | "type-ii" | "2" => Ok(SchemeKind::Type2),
            "type3" | "type-iii" | "3" => Ok(SchemeKind::Type3),
            "single" => Ok(SchemeKind::Single),
            _ => Err(Error::invalid(format!("unknown scheme {s:?}"))),
        }
    }
}

/// A fusion scheme bound to an ordered modality list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FusionScheme {
    kind: SchemeKind,
    modalities: Vec<String>,
}

impl FusionScheme {
    pub fn new(kind: SchemeKind, modalities: Vec<String>) -> Result<Self> {
        let k = modalities.len();
        match kind {
            SchemeKind::Single if k != 1 => {
                return Err(Error::invalid(format!("single-modality scheme needs exactly 1 modality, got {k}")))
            }
            SchemeKind::Type1 | SchemeKind::Type2 | SchemeKind::Type3 if k < 2 => {
                return Err(Error::invalid(format!(
                    "{} fusion needs at least 2 modalities, got {k}",
                    kind.name()
                )))
            }
            _ => {}
        }
        for (i, m) in modalities.iter().enumerate() {
            if m.is_empty() || modalities[..i].contains(m) {
                return Err(Error::invalid(format!("invalid or repeated modality name {m:?}")));
            }
        }
        Ok(FusionScheme { kind, modalities })
    }

    pub fn single(modality: impl Into<String>) -> Self {
        FusionScheme {
            kind: SchemeKind::Single,
            modalities: vec![modality.into()],
        }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    /// The single-modality scheme for each member of a Type-III ensemble.
    pub fn members(&self) -> Vec<FusionScheme> {
        match self.kind {
            SchemeKind::Type3 => self.modalities.iter().map(FusionScheme::single).collect(),
            _ => vec![self.clone()],
        }
    }

    /// Modalities joined with `+`.
    pub fn modality_label(&self) -> String {
        self.modalities.join("+")
    }

    /// The member architectures at patch side `side`, with member names.
    pub fn architectures(&self, cfg: &BaseConfig, side: usize) -> Result<Vec<(String, Architecture)>> {
        let k = self.modalities.len();
        Ok(match self.kind {
            SchemeKind::Type1 => vec![("type1".to_string(), Architecture::sequential(type1_at(k, cfg, side)?)?)],
            SchemeKind::Type2 => vec![(
                "type2".to_string(),
                Architecture::towers(type2_at(&self.modalities, cfg, side)?)?,
            )],
            SchemeKind::Type3 | SchemeKind::Single => self
                .modalities
                .iter()
                .map(|m| Ok((m.clone(), Architecture::sequential(single_at(cfg, side)?)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// Initialization seed of member `i` under `cfg`.
    ///
    /// A Type-III member and the single-modality network for the same
    /// modality share their seed.
    pub fn member_seed(&self, cfg: &BaseConfig, i: usize) -> u64 {
        match self.kind {
            SchemeKind::Type1 => derive_seed(cfg.seed, "type1"),
            SchemeKind::Type2 => derive_seed(cfg.seed, "type2"),
            SchemeKind::Type3 | SchemeKind::Single => derive_seed(cfg.seed, &format!("single/{}", self.modalities[i])),
        }
    }

    /// Total trainable parameters at the default patch size.
    pub fn param_count(&self, cfg: &BaseConfig) -> Result<usize> {
        Ok(self
            .architectures(cfg, PATCH_SIZE)?
            .iter()
            .map(|(_, a)| a.param_count())
            .sum())
    }
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind.name(), self.modality_label())
    }
}

impl core::str::FromStr for FusionScheme {
    type Err = Error;

    /// Parses `kind:M1,M2,...`, e.g. `type2:CT,PET,T2` or `single:T2`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, mods) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("scheme {s:?} must look like kind:MOD1,MOD2")))?;
        let modalities = mods.split(',').map(|m| m.trim().to_string()).collect();
        FusionScheme::new(kind.trim().parse()?, modalities)
    }
}

fn conv_stack(depth: usize, cfg: &BaseConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            height: 2,
            width: 2,
            depth,
            filters: cfg.conv1_filters,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Conv {
            height: 2,
            width: 2,
            depth: cfg.conv1_filters,
            filters: cfg.conv2_filters,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
    ]
}

fn head(inputs: usize, cfg: &BaseConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            inputs,
            outputs: cfg.dense_width,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: cfg.dense_width,
            outputs: 2,
        },
        LayerSpec::SoftmaxOutput,
    ]
}

/// Feature width after the two conv/pool stages for a `side × side` input.
pub fn stack_output_side(side: usize) -> usize {
    ((side - 1) / 2 - 1) / 2
}

fn plain_net(k: usize, cfg: &BaseConfig, side: usize) -> Result<Sequential> {
    cfg.validate()?;
    if side < 6 {
        return Err(Error::invalid(format!("patch side {side} too small for two conv/pool stages")));
    }
    let s = stack_output_side(side);
    let mut layers = conv_stack(k, cfg);
    layers.extend(head(s * s * cfg.conv2_filters, cfg));
    Sequential::new(Dims::spatial(side, side, k), layers)
}

/// Feature-level fusion network for `k ≥ 2` stacked modalities.
pub fn build_type1(k: usize, cfg: &BaseConfig) -> Result<Sequential> {
    type1_at(k, cfg, PATCH_SIZE)
}

/// [`build_type1`] for a `side × side` patch.
pub fn type1_at(k: usize, cfg: &BaseConfig, side: usize) -> Result<Sequential> {
    if k < 2 {
        return Err(Error::invalid(format!("type1 fusion needs at least 2 modalities, got {k}")));
    }
    plain_net(k, cfg, side)
}

/// Single-modality baseline: Type-I at `k = 1`.
pub fn build_single(cfg: &BaseConfig) -> Result<Sequential> {
    single_at(cfg, PATCH_SIZE)
}

pub fn single_at(cfg: &BaseConfig, side: usize) -> Result<Sequential> {
    plain_net(1, cfg, side)
}

/// Classifier-level fusion network, one tower per named modality.
pub fn build_type2(modalities: &[String], cfg: &BaseConfig) -> Result<TowerNet> {
    type2_at(modalities, cfg, PATCH_SIZE)
}

pub fn type2_at(modalities: &[String], cfg: &BaseConfig, side: usize) -> Result<TowerNet> {
    let k = modalities.len();
    if k < 2 {
        return Err(Error::invalid(format!("type2 fusion needs at least 2 modalities, got {k}")));
    }
    cfg.validate()?;
    if side < 6 {
        return Err(Error::invalid(format!("patch side {side} too small for two conv/pool stages")));
    }
    let towers = (0..k)
        .map(|_| Sequential::new(Dims::spatial(side, side, 1), conv_stack(1, cfg)))
        .collect::<Result<Vec<_>>>()?;
    let width: usize = towers.iter().map(|t| t.output().size()).sum();
    let head = Sequential::new(Dims::Flat(width), head(width, cfg))?;
    TowerNet::new(modalities.to_vec(), towers, head)
}

/// Decision-level ensemble: `k` independent single-modality networks.
pub fn build_type3(k: usize, cfg: &BaseConfig) -> Result<Vec<Sequential>> {
    if k < 2 {
        return Err(Error::invalid(format!("type3 fusion needs at least 2 modalities, got {k}")));
    }
    (0..k).map(|_| build_single(cfg)).collect()
}

/// Mean loss and running training accuracy for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// One trained classifier: a full network, or one Type-III member.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub name: String,
    pub arch: Architecture,
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetwork {
    pub scheme: FusionScheme,
    pub config: BaseConfig,
    pub members: Vec<Member>,
    /// Scheme-level log; for Type-III the accuracy is that of the vote.
    pub log: Vec<EpochLog>,
}

impl TrainedNetwork {
    /// Builds an untrained network with freshly initialized parameters.
    pub fn initialize(scheme: &FusionScheme, cfg: &BaseConfig, side: usize) -> Result<Self> {
        cfg.validate()?;
        let members = scheme
            .architectures(cfg, side)?
            .into_iter()
            .enumerate()
            .map(|(i, (name, arch))| {
                let params = arch.init_params(scheme.member_seed(cfg, i));
                Member {
                    name,
                    arch,
                    params,
                    log: Vec::new(),
                }
            })
            .collect();
        Ok(TrainedNetwork {
            scheme: scheme.clone(),
            config: cfg.clone(),
            members,
            log: Vec::new(),
        })
    }

    /// Type-III member for `modality`, repackaged as a single-modality network.
    pub fn member_as_single(&self, modality: &str) -> Option<TrainedNetwork> {
        if self.scheme.kind != SchemeKind::Type3 {
            return None;
        }
        let member = self.members.iter().find(|m| m.name == modality)?.clone();
        Some(TrainedNetwork {
            scheme: FusionScheme::single(modality),
            config: self.config.clone(),
            log: member.log.clone(),
            members: vec![member],
        })
    }

    pub fn param_count(&self) -> usize {
        self.members.iter().map(|m| m.arch.param_count()).sum()
    }

    /// Positive-class probabilities of each member for a batch of
    /// `[n, side, side, k]` patches (modality planes in scheme order).
    pub fn member_probabilities(&self, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
        let k = self.scheme.modalities.len();
        let n = inputs.shape().first().copied().unwrap_or(0);
        let per_plane = self.scheme.kind == SchemeKind::Type3;
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let probs = if per_plane {
                    let mut shape = inputs.shape().to_vec();
                    *shape.last_mut().expect("rank >= 1") = 1;
                    let plane = Tensor::new(shape, split_plane(inputs.data(), k, i))?;
                    m.arch.forward(&m.params, &plane)?
                } else {
                    m.arch.forward(&m.params, inputs)?
                };
                Ok((0..n).map(|b| probs.data()[2 * b + 1]).collect())
            })
            .collect()
    }

    /// Predicted labels (Type-III: majority vote) for a batch of patches.
    pub fn predict_labels(&self, inputs: &Tensor) -> Result<Vec<Label>> {
        let probs = self.member_probabilities(inputs)?;
        Ok((0..probs[0].len())
            .map(|b| vote_label(probs.iter().map(|p| p[b])))
            .collect())
    }
}

/// Majority label of member probabilities; ties go to the mean probability.
pub(crate) fn vote_label(probs: impl Iterator<Item = f64> + Clone) -> Label {
    let k = probs.clone().count();
    let yes = probs.clone().filter(|&p| p > 0.5).count();
    let positive = if 2 * yes != k {
        2 * yes > k
    } else {
        probs.sum::<f64>() / k as f64 > 0.5
    };
    if positive {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Trains `scheme` on `samples` for `cfg.epochs` epochs.
pub fn train(scheme: &FusionScheme, samples: &[PatchSample], cfg: &BaseConfig) -> Result<TrainedNetwork> {
    train_with(scheme, samples, cfg, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a per-epoch callback that sees the network as it stands
/// after the epoch and may stop training early.
pub fn train_with<F>(scheme: &FusionScheme, samples: &[PatchSample], cfg: &BaseConfig, mut on_epoch: F) -> Result<TrainedNetwork>
where
    F: FnMut(&EpochLog, &TrainedNetwork) -> ControlFlow<()>,
{
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let shape = first.patch.shape().to_vec();
    let k = scheme.modalities.len();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != k {
        return Err(Error::Shape {
            op: "training patch",
            expected: vec![PATCH_SIZE, PATCH_SIZE, k],
            found: shape,
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.patch.shape() != shape.as_slice()) {
        return Err(Error::Shape {
            op: "training patch",
            expected: shape,
            found: bad.patch.shape().to_vec(),
        });
    }
    let side = shape[0];
    let mut net = TrainedNetwork::initialize(scheme, cfg, side)?;
    let per_plane = scheme.kind == SchemeKind::Type3;
    let patch_len = side * side * k;

    let mut rng = rng_from_seed(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut inputs = Vec::with_capacity(cfg.batch_size * patch_len);
    let mut workspaces: Vec<Workspace> = net.members.iter().map(|_| Workspace::default()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut member_loss = vec![0.0; net.members.len()];
        let mut member_correct = vec![0usize; net.members.len()];
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            inputs.clear();
            for &i in chunk {
                inputs.extend_from_slice(samples[i].patch.data());
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label.index()).collect();
            let mut probs = Vec::with_capacity(net.members.len());
            for ((mi, member), ws) in net.members.iter_mut().enumerate().zip(&mut workspaces) {
                let x = if per_plane {
                    Tensor::from_parts(vec![b, side, side, 1], split_plane(&inputs, k, mi))
                } else {
                    Tensor::from_parts(vec![b, side, side, k], inputs.clone())
                };
                let batch = Batch::new(x, labels.clone())?;
                let wrap = |source| Error::Training {
                    epoch,
                    batch: bi,
                    source: alloc::boxed::Box::new(source),
                };
                let (grads, p) = member.arch.backprop_in(&member.params, &batch, ws).map_err(wrap)?;
                engine::sgd_step(&mut member.params, &grads, cfg.learning_rate, cfg.momentum).map_err(wrap)?;
                member_loss[mi] += grads.loss * b as f64;
                let pos: Vec<f64> = p.chunks_exact(2).map(|r| r[1]).collect();
                member_correct[mi] += pos
                    .iter()
                    .zip(&labels)
                    .filter(|(&q, &l)| usize::from(q > 0.5) == l)
                    .count();
                probs.push(pos);
            }
            correct += (0..b)
                .filter(|&j| vote_label(probs.iter().map(|p| p[j])).index() == labels[j])
                .count();
        }
        let n = samples.len() as f64;
        for (mi, member) in net.members.iter_mut().enumerate() {
            member.log.push(EpochLog {
                epoch,
                loss: member_loss[mi] / n,
                accuracy: member_correct[mi] as f64 / n,
            });
        }
        let log = EpochLog {
            epoch,
            loss: member_loss.iter().sum::<f64>() / (n * net.members.len() as f64),
            accuracy: correct as f64 / n,
        };
        net.log.push(log);
        if on_epoch(&log, &net).is_break() {
            break;
        }
    }
    Ok(net)
}

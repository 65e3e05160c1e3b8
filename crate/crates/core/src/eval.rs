//! Whole-image prediction, thresholding, majority voting, pixel accuracy
//! and subject-level cross-validation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{balanced_sites, normalize_subject, padded_stack, Fold, FoldPlan, Grid, PatchSample, SubjectVolume, PATCH_SIZE};
use crate::engine::{predict_field, Architecture, Dims, PaddedImage, ParamStore, Tensor};
use crate::fusion::{train, BaseConfig, FusionScheme, SchemeKind, TrainedNetwork};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Positive-class probability per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub subject_id: String,
    pub values: Grid<f64>,
}

/// Binary prediction per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labelmap {
    pub subject_id: String,
    pub values: Grid<u8>,
}

impl Labelmap {
    pub fn positives(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1).count()
    }
}

fn member_heatmap(arch: &Architecture, params: &ParamStore, volume: &SubjectVolume, modalities: &[String]) -> Result<Heatmap> {
    let Dims::Spatial { height: side, .. } = arch.input_dims() else {
        return Err(Error::invalid("heatmap prediction needs a patch classifier"));
    };
    let (data, hp, wp) = padded_stack(volume, modalities, side)?;
    let image = PaddedImage {
        data: &data,
        channels: modalities.len(),
        height: hp,
        width: wp,
    };
    let (h, w) = (volume.height(), volume.width());
    let probs = predict_field(arch, params, &image, h, w)?;
    Ok(Heatmap {
        subject_id: volume.subject_id().to_string(),
        values: Grid::new(h, w, probs)?,
    })
}

/// Classifies the patch around every pixel of `volume`.
///
/// Type-III ensembles have no single heatmap; use [`member_heatmaps`] and
/// [`majority_vote`] (or [`predict_labelmap`]).
pub fn predict_heatmap(net: &TrainedNetwork, volume: &SubjectVolume) -> Result<Heatmap> {
    if net.scheme.kind() == SchemeKind::Type3 {
        return Err(Error::invalid(
            "type3 ensembles have no single heatmap: predict each member and combine with majority_vote",
        ));
    }
    let m = &net.members[0];
    member_heatmap(&m.arch, &m.params, volume, net.scheme.modalities())
}

/// One heatmap per member network (one per modality for Type-III).
pub fn member_heatmaps(net: &TrainedNetwork, volume: &SubjectVolume) -> Result<Vec<Heatmap>> {
    if net.scheme.kind() != SchemeKind::Type3 {
        return Ok(alloc::vec![predict_heatmap(net, volume)?]);
    }
    net.members
        .iter()
        .zip(net.scheme.modalities())
        .map(|(m, name)| member_heatmap(&m.arch, &m.params, volume, core::slice::from_ref(name)))
        .collect()
}

/// Full-image labelmap; Type-III members are thresholded and voted.
pub fn predict_labelmap(net: &TrainedNetwork, volume: &SubjectVolume, tau: f64) -> Result<Labelmap> {
    let maps = member_heatmaps(net, volume)?;
    labelmap_from_heatmaps(&maps, tau)
}

/// Thresholds one heatmap, or votes over several.
pub fn labelmap_from_heatmaps(maps: &[Heatmap], tau: f64) -> Result<Labelmap> {
    match maps {
        [] => Err(Error::invalid("no heatmaps to combine")),
        [one] => threshold(one, tau),
        many => {
            let labels = many.iter().map(|h| threshold(h, tau)).collect::<Result<Vec<_>>>()?;
            majority_vote(&labels, many)
        }
    }
}

/// `1` where the probability is strictly greater than `tau`.
pub fn threshold(heatmap: &Heatmap, tau: f64) -> Result<Labelmap> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {tau}")));
    }
    Ok(Labelmap {
        subject_id: heatmap.subject_id.clone(),
        values: heatmap.values.map(|&p| u8::from(p > tau)),
    })
}

/// Per-pixel strict majority of `labelmaps`; an exact tie is positive iff
/// the mean of the member probabilities exceeds 0.5.
pub fn majority_vote(labelmaps: &[Labelmap], heatmaps: &[Heatmap]) -> Result<Labelmap> {
    let k = labelmaps.len();
    if k < 2 {
        return Err(Error::invalid(format!("majority vote needs at least 2 labelmaps, got {k}")));
    }
    if heatmaps.len() != k {
        return Err(Error::invalid(format!("{k} labelmaps but {} heatmaps", heatmaps.len())));
    }
    let first = &labelmaps[0];
    let dims = first.values.dims();
    for l in labelmaps {
        if l.values.dims() != dims || l.subject_id != first.subject_id {
            return Err(Error::invalid("labelmaps differ in size or subject"));
        }
    }
    for h in heatmaps {
        if h.values.dims() != dims || h.subject_id != first.subject_id {
            return Err(Error::invalid("heatmaps differ in size or subject from the labelmaps"));
        }
    }
    let n = dims.0 * dims.1;
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let yes = labelmaps.iter().filter(|l| l.values.data()[p] == 1).count();
        let positive = if 2 * yes != k {
            2 * yes > k
        } else {
            heatmaps.iter().map(|h| h.values.data()[p]).sum::<f64>() / k as f64 > 0.5
        };
        out.push(u8::from(positive));
    }
    Ok(Labelmap {
        subject_id: first.subject_id.clone(),
        values: Grid::new(dims.0, dims.1, out)?,
    })
}

/// Fraction of pixels where the two binary maps agree.
pub fn pixel_accuracy(labelmap: &Grid<u8>, mask: &Grid<u8>) -> Result<f64> {
    if labelmap.dims() != mask.dims() {
        return Err(Error::Shape {
            op: "pixel accuracy",
            expected: alloc::vec![mask.height(), mask.width()],
            found: alloc::vec![labelmap.height(), labelmap.width()],
        });
    }
    let same = labelmap.data().iter().zip(mask.data()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / mask.data().len() as f64)
}

/// Box-chart statistics of per-subject accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    pub accuracies: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation between order
/// statistics at position `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn fold_statistics(accuracies: &[f64]) -> Result<FoldMetrics> {
    if accuracies.is_empty() {
        return Err(Error::invalid("no accuracies to summarize"));
    }
    if accuracies.iter().any(|a| a.is_nan()) {
        return Err(Error::invalid("accuracy list contains NaN"));
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(FoldMetrics {
        accuracies: accuracies.to_vec(),
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Every kind paired with every modality combination, in that order.
pub fn scheme_grid(kinds: &[SchemeKind], combinations: &[Vec<String>]) -> Result<Vec<FusionScheme>> {
    let mut out = Vec::with_capacity(kinds.len() * combinations.len());
    for &kind in kinds {
        for combo in combinations {
            out.push(FusionScheme::new(kind, combo.clone())?);
        }
    }
    Ok(out)
}

/// Settings of a cross-validation run.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalOptions {
    pub schemes: Vec<FusionScheme>,
    pub config: BaseConfig,
    /// Training patches per class per fold.
    pub n_per_class: usize,
    pub tau: f64,
}

/// Accuracy of one scheme on one test subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectResult {
    pub scheme: FusionScheme,
    pub fold: usize,
    pub subject_id: String,
    pub accuracy: f64,
}

/// Subjects whose patches entered a fold's training set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAudit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub sampled_ids: BTreeSet<String>,
}

impl FoldAudit {
    /// No test subject contributed a training patch.
    pub fn is_clean(&self) -> bool {
        self.sampled_ids.is_disjoint(&self.test_ids) && self.train_ids.is_disjoint(&self.test_ids)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldRun {
    pub fold: usize,
    pub audit: FoldAudit,
    /// Results ordered by scheme (as listed), then test subject id.
    pub results: Vec<SubjectResult>,
    /// Trained networks, one per scheme in the order listed.
    pub networks: Vec<TrainedNetwork>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalReport {
    pub folds: Vec<FoldRun>,
    pub summary: Vec<(FusionScheme, FoldMetrics)>,
}

fn patches_for(sites: &[crate::data::PatchSite], vols: &[&SubjectVolume], modalities: &[String]) -> Result<Vec<PatchSample>> {
    sites
        .iter()
        .map(|s| {
            let v = vols[s.subject];
            Ok(PatchSample {
                subject_id: v.subject_id().to_string(),
                center: s.center,
                patch: crate::data::extract_patch(v, s.center, modalities)?,
                label: s.label,
            })
        })
        .collect()
}

/// Trains and evaluates every scheme on one fold.
///
/// Subjects are z-score normalized here. All schemes see the same training
/// patch locations. A single-modality network and the Type-III member for
/// the same modality are identical by construction, so each is trained once.
pub fn run_fold(cohort: &[SubjectVolume], fold: &Fold, opts: &CrossvalOptions) -> Result<FoldRun> {
    let by_id: BTreeMap<&str, &SubjectVolume> = cohort.iter().map(|v| (v.subject_id(), v)).collect();
    let lookup = |id: &String| {
        by_id
            .get(id.as_str())
            .map(|v| normalize_subject(v))
            .ok_or_else(|| Error::invalid(format!("fold {} names unknown subject {id}", fold.index)))
    };
    let train_vols = fold.train.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let test_vols = fold.test.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let train_refs: Vec<&SubjectVolume> = train_vols.iter().collect();

    let seed = derive_seed(opts.config.seed, &format!("fold{}/sample", fold.index));
    let sites = balanced_sites(&train_refs, opts.n_per_class, seed)?;
    let audit = FoldAudit {
        train_ids: fold.train.iter().cloned().collect(),
        test_ids: fold.test.iter().cloned().collect(),
        sampled_ids: sites.iter().map(|s| train_refs[s.subject].subject_id().to_string()).collect(),
    };
    if !audit.is_clean() {
        return Err(Error::invalid(format!("fold {}: test subject in training set", fold.index)));
    }

    // Type-III first so its members can stand in for the single networks.
    let mut order: Vec<usize> = (0..opts.schemes.len()).collect();
    order.sort_by_key(|&i| opts.schemes[i].kind() != SchemeKind::Type3);
    let mut singles: BTreeMap<String, TrainedNetwork> = BTreeMap::new();
    let mut networks: Vec<Option<TrainedNetwork>> = alloc::vec![None; opts.schemes.len()];
    for i in order {
        let scheme = &opts.schemes[i];
        let cached = match scheme.kind() {
            SchemeKind::Single => singles.get(&scheme.modalities()[0]).cloned(),
            _ => None,
        };
        let net = match cached {
            Some(net) => net,
            None => {
                let samples = patches_for(&sites, &train_refs, scheme.modalities())?;
                train(scheme, &samples, &opts.config)?
            }
        };
        if scheme.kind() == SchemeKind::Type3 {
            for m in scheme.modalities() {
                if !singles.contains_key(m) {
                    singles.insert(m.clone(), net.member_as_single(m).expect("type3 member"));
                }
            }
        }
        networks[i] = Some(net);
    }
    let networks: Vec<TrainedNetwork> = networks.into_iter().map(|n| n.expect("every scheme trained")).collect();

    // Heatmaps of single-modality networks are shared between schemes.
    let mut heat_cache: BTreeMap<(String, String), Heatmap> = BTreeMap::new();
    let mut results = Vec::new();
    for (scheme, net) in opts.schemes.iter().zip(&networks) {
        let mut subjects: Vec<&SubjectVolume> = test_vols.iter().collect();
        subjects.sort_by(|a, b| a.subject_id().cmp(b.subject_id()));
        for vol in subjects {
            let maps = match scheme.kind() {
                SchemeKind::Type3 | SchemeKind::Single => scheme
                    .modalities()
                    .iter()
                    .map(|m| {
                        let key = (m.clone(), vol.subject_id().to_string());
                        if let Some(h) = heat_cache.get(&key) {
                            return Ok(h.clone());
                        }
                        let single = match scheme.kind() {
                            SchemeKind::Single => net,
                            _ => singles.get(m).expect("type3 members cached"),
                        };
                        let h = predict_heatmap(single, vol)?;
                        heat_cache.insert(key, h.clone());
                        Ok(h)
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => alloc::vec![predict_heatmap(net, vol)?],
            };
            let labels = labelmap_from_heatmaps(&maps, opts.tau)?;
            results.push(SubjectResult {
                scheme: scheme.clone(),
                fold: fold.index,
                subject_id: vol.subject_id().to_string(),
                accuracy: pixel_accuracy(&labels.values, vol.mask())?,
            });
        }
    }
    Ok(FoldRun {
        fold: fold.index,
        audit,
        results,
        networks,
    })
}

/// Pools per-subject accuracies over folds, per scheme, in scheme order.
pub fn summarize(schemes: &[FusionScheme], folds: Vec<FoldRun>) -> Result<CrossvalReport> {
    let mut folds = folds;
    folds.sort_by_key(|f| f.fold);
    let summary = schemes
        .iter()
        .map(|s| {
            let accs: Vec<f64> = folds
                .iter()
                .flat_map(|f| f.results.iter())
                .filter(|r| &r.scheme == s)
                .map(|r| r.accuracy)
                .collect();
            Ok((s.clone(), fold_statistics(&accs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossvalReport { folds, summary })
}

/// Runs every fold of `plan` in sequence and summarizes.
pub fn run_crossval(cohort: &[SubjectVolume], opts: &CrossvalOptions, plan: &FoldPlan) -> Result<CrossvalReport> {
    validate_crossval(cohort, opts, plan)?;
    let folds = plan
        .folds()
        .iter()
        .map(|f| run_fold(cohort, f, opts))
        .collect::<Result<Vec<_>>>()?;
    summarize(&opts.schemes, folds)
}

/// Checks that the plan covers exactly the cohort and every scheme's
/// modalities are present in every subject.
pub fn validate_crossval(cohort: &[SubjectVolume], opts: &CrossvalOptions, plan: &FoldPlan) -> Result<()> {
    if opts.schemes.is_empty() {
        return Err(Error::invalid("no schemes to evaluate"));
    }
    opts.config.validate()?;
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {}", opts.tau)));
    }
    let ids: BTreeSet<&str> = cohort.iter().map(|v| v.subject_id()).collect();
    if ids.len() != cohort.len() {
        return Err(Error::invalid("duplicate subject ids in cohort"));
    }
    let planned: BTreeSet<&str> = plan.subjects().map(String::as_str).collect();
    if planned != ids {
        return Err(Error::invalid("fold plan does not cover exactly the cohort"));
    }
    for v in cohort {
        for s in &opts.schemes {
            for m in s.modalities() {
                v.modality(m)?;
            }
        }
    }
    Ok(())
}

/// Stacks patches `[n, side, side, k]` for direct forward calls.
pub fn stack_patches(patches: &[Tensor]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::invalid("no patches"))?;
    let mut shape = alloc::vec![patches.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(patches.len() * first.len());
    for p in patches {
        if p.shape() != first.shape() {
            return Err(Error::Shape {
                op: "stack patches",
                expected: first.shape().to_vec(),
                found: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Patch side expected by a trained network.
pub fn patch_side(net: &TrainedNetwork) -> usize {
    match net.members[0].arch.input_dims() {
        Dims::Spatial { height, .. } => height,
        Dims::Flat(_) => PATCH_SIZE,
    }
}

//! Subjects, patches, balanced sampling and subject-level folds.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};

use crate::engine::Tensor;
use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Side length of a classification patch.
pub const PATCH_SIZE: usize = 28;

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape {
                op: "grid",
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid extents must be positive");
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid extents must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        assert!(row < self.height && col < self.width, "pixel ({row}, {col}) out of bounds");
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        assert!(row < self.height && col < self.width, "pixel ({row}, {col}) out of bounds");
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Patch label; the discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative = 0,
    Positive = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

/// One subject's co-registered modality images and binary annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVolume {
    subject_id: String,
    modalities: BTreeMap<String, Grid<f64>>,
    mask: Grid<u8>,
}

impl SubjectVolume {
    pub fn new(subject_id: impl Into<String>, modalities: BTreeMap<String, Grid<f64>>, mask: Grid<u8>) -> Result<Self> {
        let subject_id = subject_id.into();
        if modalities.is_empty() {
            return Err(Error::invalid(format!("subject {subject_id}: no modality images")));
        }
        for (name, img) in &modalities {
            if img.dims() != mask.dims() {
                return Err(Error::invalid(format!(
                    "subject {subject_id}: modality {name} is {}x{} but the mask is {}x{}",
                    img.height, img.width, mask.height, mask.width
                )));
            }
        }
        if mask.data.iter().any(|&m| m > 1) {
            return Err(Error::invalid(format!("subject {subject_id}: mask values must be 0 or 1")));
        }
        Ok(SubjectVolume {
            subject_id,
            modalities,
            mask,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    /// Modality images, ordered by name.
    pub fn modalities(&self) -> &BTreeMap<String, Grid<f64>> {
        &self.modalities
    }

    pub fn modality(&self, name: &str) -> Result<&Grid<f64>> {
        self.modalities
            .get(name)
            .ok_or_else(|| Error::invalid(format!("subject {} has no modality {name}", self.subject_id)))
    }

    pub fn mask(&self) -> &Grid<u8> {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    fn check_center(&self, (row, col): (usize, usize)) -> Result<()> {
        if row >= self.height() || col >= self.width() {
            return Err(Error::invalid(format!(
                "center ({row}, {col}) outside {}x{} image of subject {}",
                self.height(),
                self.width(),
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Per-modality z-score; an all-constant image becomes all zeros.
pub fn normalize_subject(volume: &SubjectVolume) -> SubjectVolume {
    let modalities = volume
        .modalities
        .iter()
        .map(|(name, img)| (name.clone(), zscore(img)))
        .collect();
    SubjectVolume {
        subject_id: volume.subject_id.clone(),
        modalities,
        mask: volume.mask.clone(),
    }
}

fn zscore(img: &Grid<f64>) -> Grid<f64> {
    let first = img.data[0];
    if img.data.iter().all(|&v| v == first) {
        return img.map(|_| 0.0);
    }
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    img.map(|v| (v - mean) / std)
}

/// Reflects an out-of-range coordinate back into `0..n` about the edge
/// pixels (`… c b | a b c … | … b a`), periodically for large offsets.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn planes<'a>(volume: &'a SubjectVolume, modalities: &[String]) -> Result<Vec<&'a Grid<f64>>> {
    if modalities.is_empty() {
        return Err(Error::invalid("at least one modality is required"));
    }
    modalities.iter().map(|m| volume.modality(m)).collect()
}

fn patch_from_planes(planes: &[&Grid<f64>], (row, col): (usize, usize)) -> Tensor {
    let k = planes.len();
    let (h, w) = planes[0].dims();
    let half = (PATCH_SIZE / 2) as isize;
    let mut data = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * k);
    for i in 0..PATCH_SIZE {
        let r = mirror_index(row as isize - half + i as isize, h);
        for j in 0..PATCH_SIZE {
            let c = mirror_index(col as isize - half + j as isize, w);
            for p in planes {
                data.push(p.data[r * w + c]);
            }
        }
    }
    Tensor::from_parts(vec![PATCH_SIZE, PATCH_SIZE, k], data)
}

/// The 28×28×k patch whose pixel (14, 14) sits on `center`, with modality
/// planes stacked in the given order and mirror-padded at the borders.
pub fn extract_patch(volume: &SubjectVolume, center: (usize, usize), modalities: &[String]) -> Result<Tensor> {
    volume.check_center(center)?;
    let planes = planes(volume, modalities)?;
    Ok(patch_from_planes(&planes, center))
}

/// Whole-image padded stack used by dense prediction: `(h + 27) × (w + 27) × k`.
pub(crate) fn padded_stack(volume: &SubjectVolume, modalities: &[String], side: usize) -> Result<(Vec<f64>, usize, usize)> {
    let planes = planes(volume, modalities)?;
    let (h, w) = (volume.height(), volume.width());
    let (hp, wp) = (h + side - 1, w + side - 1);
    let half = (side / 2) as isize;
    let mut data = Vec::with_capacity(hp * wp * planes.len());
    for i in 0..hp {
        let r = mirror_index(i as isize - half, h);
        for j in 0..wp {
            let c = mirror_index(j as isize - half, w);
            for p in &planes {
                data.push(p.data[r * w + c]);
            }
        }
    }
    Ok((data, hp, wp))
}

pub fn label_patch(volume: &SubjectVolume, center: (usize, usize)) -> Result<Label> {
    volume.check_center(center)?;
    Ok(label_at(volume, center))
}

fn label_at(volume: &SubjectVolume, (row, col): (usize, usize)) -> Label {
    if volume.mask.get(row, col) == 1 {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// A labeled training or test patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub subject_id: String,
    pub center: (usize, usize),
    pub patch: Tensor,
    pub label: Label,
}

/// One sample per pixel, in row-major center order.
pub fn enumerate_patches<'a>(
    volume: &'a SubjectVolume,
    modalities: &[String],
) -> Result<impl Iterator<Item = PatchSample> + 'a> {
    let planes = planes(volume, modalities)?;
    let w = volume.width();
    Ok((0..volume.height() * w).map(move |p| {
        let center = (p / w, p % w);
        PatchSample {
            subject_id: volume.subject_id.clone(),
            center,
            patch: patch_from_planes(&planes, center),
            label: label_at(volume, center),
        }
    }))
}

/// A sampled patch location: subject index into the pool, center, label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSite {
    pub subject: usize,
    pub center: (usize, usize),
    pub label: Label,
}

/// Draws `n_per_class` positive and `n_per_class` negative sites without
/// replacement, uniformly over the pooled class populations of `subjects`.
/// Positives come first in the returned list.
pub fn balanced_sites(subjects: &[&SubjectVolume], n_per_class: usize, seed: u64) -> Result<Vec<PatchSite>> {
    let mut pools: [Vec<PatchSite>; 2] = [Vec::new(), Vec::new()];
    for (s, v) in subjects.iter().enumerate() {
        for r in 0..v.height() {
            for c in 0..v.width() {
                let label = label_at(v, (r, c));
                pools[label.index()].push(PatchSite {
                    subject: s,
                    center: (r, c),
                    label,
                });
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Positive, Label::Negative] {
        let pool = &pools[label.index()];
        if pool.len() < n_per_class {
            return Err(Error::InsufficientClass {
                class: label.name(),
                requested: n_per_class,
                available: pool.len(),
            });
        }
        out.extend(index::sample(&mut rng, pool.len(), n_per_class).into_iter().map(|i| pool[i]));
    }
    Ok(out)
}

/// Balanced training set: `n_per_class` patches of each class drawn without
/// replacement from `subjects`, deterministic per seed.
pub fn balanced_sample(
    subjects: &[&SubjectVolume],
    modalities: &[String],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let sites = balanced_sites(subjects, n_per_class, seed)?;
    let stacks = subjects
        .iter()
        .map(|v| planes(v, modalities))
        .collect::<Result<Vec<_>>>()?;
    Ok(sites
        .into_iter()
        .map(|site| PatchSample {
            subject_id: subjects[site.subject].subject_id.clone(),
            center: site.center,
            patch: patch_from_planes(&stacks[site.subject], site.center),
            label: site.label,
        })
        .collect())
}

/// Subject-level cross-validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    assignments: BTreeMap<String, usize>,
    folds: Vec<Fold>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl FoldPlan {
    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn subjects(&self) -> impl Iterator<Item = &String> {
        self.assignments.keys()
    }
}

/// Seeded shuffle of the (sorted) subject ids followed by round-robin fold
/// assignment.
pub fn make_folds(subject_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > subject_ids.len() {
        return Err(Error::invalid(format!(
            "{n_folds} folds requested for only {} subjects",
            subject_ids.len()
        )));
    }
    let unique: BTreeSet<&String> = subject_ids.iter().collect();
    if unique.len() != subject_ids.len() {
        return Err(Error::invalid("subject ids must be unique"));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut rng_from_seed(seed));
    let assignments: BTreeMap<String, usize> = order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % n_folds))
        .collect();
    let folds = (0..n_folds)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = assignments.iter().partition(|(_, &a)| a == f);
            Fold {
                index: f,
                train: train.into_iter().map(|(id, _)| id.to_string()).collect(),
                test: test.into_iter().map(|(id, _)| id.to_string()).collect(),
            }
        })
        .collect();
    Ok(FoldPlan { assignments, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngExt;

    fn subject(id: &str, h: usize, w: usize, seed: u64) -> SubjectVolume {
        let mut rng = rng_from_seed(seed);
        let mut mods = BTreeMap::new();
        for name in ["CT", "PET"] {
            mods.insert(name.to_string(), Grid::from_fn(h, w, |_, _| rng.random_range(-2.0..5.0)));
        }
        let mask = Grid::from_fn(h, w, |r, c| u8::from(r > h / 3 && c < w / 2));
        SubjectVolume::new(id, mods, mask).unwrap()
    }

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn volume_validation() {
        let mut mods = BTreeMap::new();
        mods.insert("T2".to_string(), Grid::filled(4, 5, 0.0));
        assert!(SubjectVolume::new("a", mods.clone(), Grid::filled(4, 4, 0)).is_err());
        assert!(SubjectVolume::new("a", mods.clone(), Grid::filled(4, 5, 2)).is_err());
        assert!(SubjectVolume::new("a", BTreeMap::new(), Grid::filled(4, 5, 0)).is_err());
        assert!(SubjectVolume::new("a", mods, Grid::filled(4, 5, 1)).is_ok());
    }

    fn single(name: &str, img: Grid<f64>) -> SubjectVolume {
        let mask = Grid::filled(img.height(), img.width(), 0);
        let mut mods = BTreeMap::new();
        mods.insert(name.to_string(), img);
        SubjectVolume::new("s", mods, mask).unwrap()
    }

    #[test]
    fn normalize_constant_and_two_valued() {
        let v = normalize_subject(&single("A", Grid::filled(3, 3, 7.5)));
        assert!(v.modality("A").unwrap().data().iter().all(|&x| x == 0.0));

        let v = normalize_subject(&single("B", Grid::new(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap()));
        assert_eq!(v.modality("B").unwrap().data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn normalize_random_image_moments() {
        let v = normalize_subject(&subject("s", 40, 33, 3));
        for img in v.modalities().values() {
            let n = img.data().len() as f64;
            let mean = img.data().iter().sum::<f64>() / n;
            let std = libm::sqrt(img.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n);
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_index_reflects_about_edge_pixels() {
        assert_eq!(mirror_index(-1, 5), 1);
        assert_eq!(mirror_index(-2, 5), 2);
        assert_eq!(mirror_index(5, 5), 3);
        assert_eq!(mirror_index(6, 5), 2);
        assert_eq!(mirror_index(-14, 1), 0);
        assert_eq!(mirror_index(-9, 5), 1);
    }

    #[test]
    fn middle_patch_of_fig_sized_image_is_plain_copy() {
        let v = subject("s", 135, 145, 1);
        let mods = names(&["PET", "CT"]);
        let (r0, c0) = (67, 72);
        let p = extract_patch(&v, (r0, c0), &mods).unwrap();
        assert_eq!(p.shape(), &[28, 28, 2]);
        for i in 0..28 {
            for j in 0..28 {
                let (r, c) = (r0 - 14 + i, c0 - 14 + j);
                assert_eq!(p.at(&[i, j, 0]), v.modality("PET").unwrap().get(r, c));
                assert_eq!(p.at(&[i, j, 1]), v.modality("CT").unwrap().get(r, c));
            }
        }
        assert_eq!(p.at(&[14, 14, 0]), v.modality("PET").unwrap().get(r0, c0));
    }

    /// Pads the whole image by 14 mirrored pixels per side, then slices.
    fn padded_oracle(img: &Grid<f64>, center: (usize, usize)) -> Vec<f64> {
        let (h, w) = img.dims();
        let ph = h + 28;
        let pw = w + 28;
        let mut pad = vec![0.0; ph * pw];
        for i in 0..ph {
            for j in 0..pw {
                let reflect = |x: isize, n: usize| -> usize {
                    let n = n as isize;
                    if x < 0 {
                        (-x) as usize
                    } else if x >= n {
                        (2 * (n - 1) - x) as usize
                    } else {
                        x as usize
                    }
                };
                pad[i * pw + j] = img.get(reflect(i as isize - 14, h), reflect(j as isize - 14, w));
            }
        }
        let mut out = Vec::new();
        for i in 0..28 {
            for j in 0..28 {
                out.push(pad[(center.0 + i) * pw + center.1 + j]);
            }
        }
        out
    }

    #[test]
    fn corner_patch_matches_padded_oracle() {
        let v = subject("s", 40, 36, 9);
        let mods = names(&["CT"]);
        for center in [(0, 0), (0, 35), (39, 0), (39, 35), (5, 20)] {
            let p = extract_patch(&v, center, &mods).unwrap();
            assert_eq!(p.data(), padded_oracle(v.modality("CT").unwrap(), center).as_slice());
        }
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let mut mods = BTreeMap::new();
        mods.insert("X".to_string(), Grid::filled(10, 7, 3.25));
        let v = SubjectVolume::new("c", mods, Grid::filled(10, 7, 0)).unwrap();
        for center in [(0, 0), (9, 6), (4, 3)] {
            let p = extract_patch(&v, center, &names(&["X"])).unwrap();
            assert!(p.data().iter().all(|&x| x == 3.25));
        }
    }

    #[test]
    fn center_outside_image_is_rejected() {
        let v = subject("s", 20, 20, 1);
        assert!(extract_patch(&v, (20, 0), &names(&["CT"])).is_err());
        assert!(label_patch(&v, (0, 20)).is_err());
        assert!(extract_patch(&v, (0, 0), &names(&["T1"])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn interior_patch_is_raw_window(r in 14usize..50, c in 14usize..40) {
            let v = subject("p", 64, 54, 77);
            let p = extract_patch(&v, (r, c), &names(&["CT"])).unwrap();
            let img = v.modality("CT").unwrap();
            for i in 0..28 {
                for j in 0..28 {
                    prop_assert_eq!(p.at(&[i, j, 0]), img.get(r + i - 14, c + j - 14));
                }
            }
        }
    }

    #[test]
    fn labels_follow_mask() {
        let v = subject("s", 30, 30, 2);
        let mut positives = 0;
        for s in enumerate_patches(&v, &names(&["CT"])).unwrap() {
            assert_eq!(s.label == Label::Positive, v.mask().get(s.center.0, s.center.1) == 1);
            assert_eq!(label_patch(&v, s.center).unwrap(), s.label);
            positives += usize::from(s.label == Label::Positive);
        }
        let mask_sum: usize = v.mask().data().iter().map(|&m| m as usize).sum();
        assert_eq!(positives, mask_sum);

        let mut mods = BTreeMap::new();
        mods.insert("X".to_string(), Grid::filled(5, 5, 1.0));
        let empty = SubjectVolume::new("e", mods, Grid::filled(5, 5, 0)).unwrap();
        assert!(enumerate_patches(&empty, &names(&["X"])).unwrap().all(|s| s.label == Label::Negative));
    }

    #[test]
    fn enumeration_counts() {
        let mut mods = BTreeMap::new();
        mods.insert("X".to_string(), Grid::filled(135, 145, 0.0));
        let v = SubjectVolume::new("big", mods, Grid::filled(135, 145, 0)).unwrap();
        let samples: Vec<_> = enumerate_patches(&v, &names(&["X"])).unwrap().collect();
        assert_eq!(samples.len(), 19_575);
        assert_eq!(samples[1].center, (0, 1));
        assert_eq!(samples[145].center, (1, 0));

        let mut mods = BTreeMap::new();
        mods.insert("X".to_string(), Grid::filled(1, 1, 0.0));
        let tiny = SubjectVolume::new("t", mods, Grid::filled(1, 1, 1)).unwrap();
        assert_eq!(enumerate_patches(&tiny, &names(&["X"])).unwrap().count(), 1);
    }

    #[test]
    fn balanced_sample_is_exact_and_deterministic() {
        let a = subject("a", 30, 30, 1);
        let b = subject("b", 30, 30, 2);
        let pool = [&a, &b];
        let mods = names(&["CT", "PET"]);
        let s1 = balanced_sample(&pool, &mods, 100, 5).unwrap();
        assert_eq!(s1.len(), 200);
        assert_eq!(s1.iter().filter(|s| s.label == Label::Positive).count(), 100);
        let s2 = balanced_sample(&pool, &mods, 100, 5).unwrap();
        assert_eq!(s1, s2);
        let s3 = balanced_sample(&pool, &mods, 100, 6).unwrap();
        assert_ne!(s1, s3);
        // without replacement
        let set: BTreeSet<_> = s1.iter().map(|s| (s.subject_id.clone(), s.center)).collect();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn balanced_sample_reports_deficient_class() {
        let mut mods = BTreeMap::new();
        mods.insert("X".to_string(), Grid::filled(5, 5, 0.0));
        let mut mask = Grid::filled(5, 5, 0u8);
        mask.set(2, 2, 1);
        let v = SubjectVolume::new("s", mods, mask).unwrap();
        let err = balanced_sample(&[&v], &names(&["X"]), 3, 0).unwrap_err();
        assert_eq!(
            err,
            Error::InsufficientClass {
                class: "positive",
                requested: 3,
                available: 1
            }
        );
    }

    #[test]
    fn sampled_centers_are_unbiased_across_seeds() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let a = subject("a", 24, 24, 1);
        let b = subject("b", 24, 20, 2);
        let pool = [&a, &b];
        // spatial bins: subject x 3x3 blocks, tallied separately per class
        let bin = |s: usize, (r, c): (usize, usize), v: &SubjectVolume| {
            s * 9 + (3 * r / v.height()) * 3 + 3 * c / v.width()
        };
        let mut population = [[0usize; 18]; 2];
        for (s, v) in pool.iter().enumerate() {
            for r in 0..v.height() {
                for c in 0..v.width() {
                    population[label_at(v, (r, c)).index()][bin(s, (r, c), v)] += 1;
                }
            }
        }
        let mut observed = [[0usize; 18]; 2];
        let n = 60;
        for seed in 0..20 {
            for site in balanced_sites(&pool, n, seed).unwrap() {
                observed[site.label.index()][bin(site.subject, site.center, pool[site.subject])] += 1;
            }
        }
        for class in 0..2 {
            let total: usize = population[class].iter().sum();
            let drawn = 20.0 * n as f64;
            let mut stat = 0.0;
            let mut cells = 0;
            for k in 0..18 {
                if population[class][k] == 0 {
                    assert_eq!(observed[class][k], 0);
                    continue;
                }
                let expected = drawn * population[class][k] as f64 / total as f64;
                stat += (observed[class][k] as f64 - expected).powi(2) / expected;
                cells += 1;
            }
            let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
            assert!(p > 0.01, "class {class}: chi2 {stat} over {cells} bins, p = {p}");
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i:03}")).collect()
    }

    #[test]
    fn fifty_subjects_ten_folds() {
        let plan = make_folds(&ids(50), 10, 3).unwrap();
        assert_eq!(plan.folds().len(), 10);
        let mut seen = BTreeSet::new();
        for f in plan.folds() {
            assert_eq!(f.train.len(), 45);
            assert_eq!(f.test.len(), 5);
            let train: BTreeSet<_> = f.train.iter().collect();
            assert!(f.test.iter().all(|t| !train.contains(t)));
            for t in &f.test {
                assert!(seen.insert(t.clone()));
            }
        }
        assert_eq!(seen.len(), 50);
    }

    #[test]
    fn leave_one_out_and_errors() {
        let plan = make_folds(&ids(10), 10, 0).unwrap();
        assert!(plan.folds().iter().all(|f| f.test.len() == 1 && f.train.len() == 9));
        assert!(make_folds(&ids(10), 1, 0).is_err());
        assert!(make_folds(&ids(3), 4, 0).is_err());
        let mut dup = ids(4);
        dup.push("S000".to_string());
        assert!(make_folds(&dup, 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(n in 2usize..60, k in 2usize..12, seed: u64) {
            prop_assume!(k <= n);
            let plan = make_folds(&ids(n), k, seed).unwrap();
            let sizes: Vec<usize> = plan.folds().iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            for f in plan.folds() {
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                prop_assert!(f.test.iter().all(|t| !f.train.contains(t)));
            }
        }
    }
}

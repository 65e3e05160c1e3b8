//! Seeded synthetic cohorts of elliptical tumors seen through several
//! modalities.
//!
//! Each subject has one tumor ellipse (the ground-truth mask) with a
//! concentric core, plus per-modality distractor ellipses that look exactly
//! like tumor, core included, in a single modality only. A single modality therefore cannot
//! tell its distractors from the tumor, while the modalities together can.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::data::{Grid, SubjectVolume, PATCH_SIZE};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

/// Border kept clear around the tumor so full patches fit inside the image.
pub const MARGIN: usize = PATCH_SIZE / 2;

/// Intensity model of one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrast {
    pub background: f64,
    pub tumor: f64,
    pub core: f64,
    pub noise: f64,
    /// Number of tumor-like ellipses that appear in this modality only.
    pub distractors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// Flips the noiseless signal about the midpoint of background and tumor.
    Invert,
    /// Drops the signal; the image becomes background level plus noise.
    NoiseOnly,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::Invert => "invert",
            Corruption::NoiseOnly => "noise_only",
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Corruption::None),
            "invert" => Ok(Corruption::Invert),
            "noise_only" => Ok(Corruption::NoiseOnly),
            other => Err(Error::invalid(format!("unknown corruption `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub subjects: usize,
    /// Inclusive range the two semi-axes are drawn from, in pixels.
    pub semi_axes: (f64, f64),
    /// Core semi-axes as a fraction of the tumor semi-axes.
    pub core_fraction: f64,
    pub contrast: BTreeMap<String, Contrast>,
    pub corruption: BTreeMap<String, Corruption>,
    /// Share of subjects that receive the configured corruption.
    pub corruption_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let c = |background, tumor, core, noise, distractors| Contrast {
            background,
            tumor,
            core,
            noise,
            distractors,
        };
        let contrast = [
            ("CT", c(0.0, 0.6, 0.6, 0.9, 1)),
            ("PET", c(0.0, 1.6, 0.0, 0.6, 1)),
            ("T1", c(0.0, 0.8, 0.4, 0.7, 1)),
            ("T2", c(0.0, 1.0, 1.3, 0.5, 1)),
        ]
        .into_iter()
        .map(|(m, c)| (m.to_string(), c))
        .collect();
        PhantomConfig {
            height: 96,
            width: 96,
            subjects: 20,
            semi_axes: (8.0, 16.0),
            core_fraction: 0.6,
            contrast,
            corruption: BTreeMap::new(),
            corruption_fraction: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.semi_axes;
        if !(lo >= 1.0 && lo <= hi) {
            return Err(Error::invalid(format!("semi_axes: need 1 <= min <= max, got ({lo}, {hi})")));
        }
        let room = self.height.min(self.width) as f64;
        if 2.0 * (hi + MARGIN as f64) > room - 1.0 {
            return Err(Error::invalid(format!(
                "semi_axes: max {hi} leaves less than {MARGIN} pixels of margin in a {}x{} image",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.core_fraction) {
            return Err(Error::invalid(format!("core_fraction must lie in [0, 1), got {}", self.core_fraction)));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::invalid(format!(
                "corruption_fraction must lie in [0, 1], got {}",
                self.corruption_fraction
            )));
        }
        if self.subjects == 0 {
            return Err(Error::invalid("subjects must be at least 1"));
        }
        if self.contrast.is_empty() {
            return Err(Error::invalid("contrast: at least one modality is required"));
        }
        for (m, c) in &self.contrast {
            let levels = [c.background, c.tumor, c.core, c.noise];
            if levels.iter().any(|v| !v.is_finite()) || c.noise < 0.0 {
                return Err(Error::invalid(format!("contrast.{m}: levels must be finite and noise >= 0")));
            }
        }
        for m in self.corruption.keys() {
            if !self.contrast.contains_key(m) {
                return Err(Error::invalid(format!("corruption.{m}: no such modality")));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<String> {
        self.contrast.keys().cloned().collect()
    }
}

/// A rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Rotation of the first semi-axis from the column axis, in radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (a, b) = self.semi_axes;
        if a <= 0.0 || b <= 0.0 {
            return false;
        }
        let dy = row as f64 - self.center.0;
        let dx = col as f64 - self.center.1;
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let u = (dx * c + dy * s) / a;
        let v = (dy * c - dx * s) / b;
        u * u + v * v <= 1.0
    }

    pub fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            semi_axes: (self.semi_axes.0 * f, self.semi_axes.1 * f),
            ..*self
        }
    }

    fn radius(&self) -> f64 {
        self.semi_axes.0.max(self.semi_axes.1)
    }

    fn apart(&self, other: &Ellipse, gap: f64) -> bool {
        let dy = self.center.0 - other.center.0;
        let dx = self.center.1 - other.center.1;
        let d = self.radius() + other.radius() + gap;
        dy * dy + dx * dx > d * d
    }
}

/// Geometry of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tumor: Ellipse,
    pub distractors: BTreeMap<String, Vec<Ellipse>>,
    pub corrupted: bool,
}

fn subject_seed(cfg: &PhantomConfig, index: usize) -> u64 {
    cfg.seed ^ index as u64
}

fn random_ellipse(rng: &mut Rng, cfg: &PhantomConfig, margin: f64) -> Ellipse {
    let (lo, hi) = cfg.semi_axes;
    let a = rng.random_range(lo..=hi);
    let b = rng.random_range(lo..=hi);
    let r = a.max(b) + margin;
    let cy = rng.random_range(r..=(cfg.height - 1) as f64 - r);
    let cx = rng.random_range(r..=(cfg.width - 1) as f64 - r);
    Ellipse {
        center: (cy, cx),
        semi_axes: (a, b),
        angle: rng.random_range(0.0..core::f64::consts::PI),
    }
}

const PLACEMENT_TRIES: usize = 200;

/// Draws the tumor and distractor geometry of subject `index`.
///
/// Distractors keep clear of the tumor and of each other; one that cannot
/// be placed after a fixed number of tries is dropped.
pub fn layout(cfg: &PhantomConfig, index: usize) -> Result<Layout> {
    cfg.validate()?;
    let seed = subject_seed(cfg, index);
    let mut rng = rng_from_seed(derive_seed(seed, "geometry"));
    let tumor = random_ellipse(&mut rng, cfg, MARGIN as f64);
    let mut placed = alloc::vec![tumor];
    let mut distractors = BTreeMap::new();
    for (m, c) in &cfg.contrast {
        let mut own = Vec::new();
        for _ in 0..c.distractors {
            for _ in 0..PLACEMENT_TRIES {
                let e = random_ellipse(&mut rng, cfg, 1.0);
                if placed.iter().all(|p| p.apart(&e, 2.0)) {
                    placed.push(e);
                    own.push(e);
                    break;
                }
            }
        }
        distractors.insert(m.clone(), own);
    }
    let corrupted = !cfg.corruption.is_empty() && {
        let mut r = rng_from_seed(derive_seed(seed, "corrupt"));
        r.random::<f64>() < cfg.corruption_fraction
    };
    Ok(Layout {
        tumor,
        distractors,
        corrupted,
    })
}

pub fn subject_id(index: usize) -> String {
    format!("P{index:03}")
}

/// Generates subject `index` of the cohort described by `cfg`.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<SubjectVolume> {
    let lay = layout(cfg, index)?;
    let (h, w) = (cfg.height, cfg.width);
    let core = lay.tumor.scaled(cfg.core_fraction);
    let mask = Grid::from_fn(h, w, |r, c| u8::from(lay.tumor.contains(r, c)));
    let seed = subject_seed(cfg, index);
    let mut modalities = BTreeMap::new();
    for (m, con) in &cfg.contrast {
        let corruption = if lay.corrupted {
            cfg.corruption.get(m).copied().unwrap_or_default()
        } else {
            Corruption::None
        };
        let own: Vec<(Ellipse, Ellipse)> = lay.distractors[m]
            .iter()
            .map(|e| (*e, e.scaled(cfg.core_fraction)))
            .collect();
        let signal = |r: usize, c: usize| {
            if core.contains(r, c) || own.iter().any(|(_, k)| k.contains(r, c)) {
                con.core
            } else if mask.get(r, c) == 1 || own.iter().any(|(e, _)| e.contains(r, c)) {
                con.tumor
            } else {
                con.background
            }
        };
        let normal = Normal::new(0.0, con.noise).map_err(|e| Error::invalid(format!("contrast.{m}: {e}")))?;
        let mut rng = rng_from_seed(derive_seed(seed, &format!("noise/{m}")));
        let img = Grid::from_fn(h, w, |r, c| {
            let s = match corruption {
                Corruption::None => signal(r, c),
                Corruption::Invert => con.background + con.tumor - signal(r, c),
                Corruption::NoiseOnly => con.background,
            };
            s + normal.sample(&mut rng)
        });
        modalities.insert(m.clone(), img);
    }
    SubjectVolume::new(subject_id(index), modalities, mask)
}

pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Vec<SubjectVolume>> {
    cfg.validate()?;
    (0..cfg.subjects).map(|i| generate_subject(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::enumerate_patches;
    use alloc::vec;

    fn cfg(seed: u64) -> PhantomConfig {
        PhantomConfig {
            seed,
            ..PhantomConfig::default()
        }
    }

    fn set_contrast(cfg: &mut PhantomConfig, m: &str, f: impl FnOnce(&mut Contrast)) {
        f(cfg.contrast.get_mut(m).unwrap());
    }

    /// Ellipse interior through the quadratic form `dᵀ A d <= 1`.
    fn quadratic_inside(e: &Ellipse, r: usize, c: usize) -> bool {
        let (a, b) = e.semi_axes;
        let (s, co) = (e.angle.sin(), e.angle.cos());
        let a11 = co * co / (a * a) + s * s / (b * b);
        let a22 = s * s / (a * a) + co * co / (b * b);
        let a12 = s * co * (1.0 / (a * a) - 1.0 / (b * b));
        let x = c as f64 - e.center.1;
        let y = r as f64 - e.center.0;
        a11 * x * x + 2.0 * a12 * x * y + a22 * y * y <= 1.0 + 1e-12
    }

    #[test]
    fn validation() {
        assert!(cfg(0).validate().is_ok());
        let mut c = cfg(0);
        c.semi_axes = (8.0, 34.0);
        assert!(c.validate().is_err());
        let mut c = cfg(0);
        c.core_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(0);
        set_contrast(&mut c, "CT", |x| x.noise = -0.1);
        assert!(c.validate().is_err());
        let mut c = cfg(0);
        c.corruption.insert("MRA".into(), Corruption::Invert);
        assert!(c.validate().is_err());
        let mut c = cfg(0);
        c.subjects = 0;
        assert!(generate_cohort(&c).is_err());
        assert_eq!("noise_only".parse::<Corruption>().unwrap(), Corruption::NoiseOnly);
        assert!("flip".parse::<Corruption>().is_err());
    }

    #[test]
    fn mask_is_the_ellipse_predicate() {
        let c = cfg(3);
        for i in 0..10 {
            let lay = layout(&c, i).unwrap();
            let v = generate_subject(&c, i).unwrap();
            for r in 0..c.height {
                for col in 0..c.width {
                    assert_eq!(v.mask().get(r, col) == 1, quadratic_inside(&lay.tumor, r, col), "subject {i} ({r},{col})");
                }
            }
        }
    }

    #[test]
    fn tumor_keeps_patch_margin() {
        let c = cfg(11);
        for i in 0..30 {
            let v = generate_subject(&c, i).unwrap();
            for r in 0..c.height {
                for col in 0..c.width {
                    if v.mask().get(r, col) == 1 {
                        assert!(r >= MARGIN && col >= MARGIN && r + MARGIN < c.height && col + MARGIN < c.width);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let c = cfg(7);
        assert_eq!(generate_subject(&c, 4).unwrap(), generate_subject(&c, 4).unwrap());
        assert_ne!(generate_subject(&c, 4).unwrap(), generate_subject(&c, 5).unwrap());
        assert_ne!(generate_subject(&c, 4).unwrap(), generate_subject(&cfg(8), 4).unwrap());
        assert_eq!(generate_cohort(&c).unwrap()[4], generate_subject(&c, 4).unwrap());
    }

    #[test]
    fn core_fraction_only_touches_modalities_with_a_distinct_core() {
        let mut a = cfg(2);
        set_contrast(&mut a, "CT", |x| x.core = x.tumor);
        let mut b = a.clone();
        b.core_fraction = 0.3;
        let mut zero = a.clone();
        zero.core_fraction = 0.0;
        let mut flat_pet = zero.clone();
        set_contrast(&mut flat_pet, "PET", |x| x.core = x.tumor);
        for i in 0..3 {
            let (va, vb) = (generate_subject(&a, i).unwrap(), generate_subject(&b, i).unwrap());
            assert_eq!(va.modality("CT").unwrap(), vb.modality("CT").unwrap());
            assert_ne!(va.modality("PET").unwrap(), vb.modality("PET").unwrap());
            assert_eq!(generate_subject(&zero, i).unwrap(), generate_subject(&flat_pet, i).unwrap());
        }
    }

    #[test]
    fn cold_core_matches_background() {
        let mut c = cfg(0);
        let pet = c.contrast["PET"];
        assert_eq!(pet.core, pet.background);
        c.subjects = 10;
        for seed in 0..10 {
            c.seed = seed * 101;
            let lay = layout(&c, 0).unwrap();
            let v = generate_subject(&c, 0).unwrap();
            let img = v.modality("PET").unwrap();
            let core = lay.tumor.scaled(c.core_fraction);
            let (mut cs, mut cn, mut bs, mut bn) = (0.0, 0, 0.0, 0);
            for r in 0..c.height {
                for col in 0..c.width {
                    let x = img.get(r, col);
                    if quadratic_inside(&core, r, col) {
                        cs += x;
                        cn += 1;
                    } else if !quadratic_inside(&lay.tumor, r, col)
                        && !lay.distractors["PET"].iter().any(|e| quadratic_inside(e, r, col))
                    {
                        bs += x;
                        bn += 1;
                    }
                }
            }
            assert!(cn > 0);
            let diff = (cs / cn as f64 - bs / bn as f64).abs();
            assert!(diff < pet.noise / 3.0, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn corruption_leaves_other_modalities_alone() {
        let clean = cfg(5);
        for mode in [Corruption::Invert, Corruption::NoiseOnly] {
            let mut bad = clean.clone();
            bad.corruption.insert("PET".into(), mode);
            for i in 0..4 {
                let (a, b) = (generate_subject(&clean, i).unwrap(), generate_subject(&bad, i).unwrap());
                assert_eq!(a.mask(), b.mask());
                for m in ["CT", "T1", "T2"] {
                    assert_eq!(a.modality(m).unwrap(), b.modality(m).unwrap());
                }
                assert_ne!(a.modality("PET").unwrap(), b.modality("PET").unwrap());
            }
        }
    }

    #[test]
    fn noiseless_corruptions() {
        let mut c = cfg(9);
        for con in c.contrast.values_mut() {
            con.noise = 0.0;
        }
        let clean = generate_subject(&c, 0).unwrap();
        let pet = c.contrast["PET"];
        c.corruption.insert("PET".into(), Corruption::Invert);
        let inv = generate_subject(&c, 0).unwrap();
        let (x, y) = (clean.modality("PET").unwrap(), inv.modality("PET").unwrap());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a + b, pet.background + pet.tumor);
        }
        c.corruption.insert("PET".into(), Corruption::NoiseOnly);
        let flat = generate_subject(&c, 0).unwrap();
        assert!(flat.modality("PET").unwrap().data().iter().all(|&v| v == pet.background));
    }

    #[test]
    fn corruption_fraction_selects_subjects() {
        let mut c = cfg(1);
        c.subjects = 40;
        c.corruption.insert("T2".into(), Corruption::Invert);
        let count = |c: &PhantomConfig| (0..c.subjects).filter(|&i| layout(c, i).unwrap().corrupted).count();
        assert_eq!(count(&c), 40);
        c.corruption_fraction = 0.0;
        assert_eq!(count(&c), 0);
        c.corruption_fraction = 0.5;
        let n = count(&c);
        assert!(n > 8 && n < 32, "{n}");
    }

    #[test]
    fn distractors_stay_off_the_tumor() {
        let c = cfg(4);
        let mut placed = 0;
        for i in 0..20 {
            let lay = layout(&c, i).unwrap();
            let v = generate_subject(&c, i).unwrap();
            for es in lay.distractors.values() {
                placed += es.len();
                for e in es {
                    for r in 0..c.height {
                        for col in 0..c.width {
                            if quadratic_inside(e, r, col) {
                                assert_eq!(v.mask().get(r, col), 0);
                            }
                        }
                    }
                }
            }
        }
        assert!(placed >= 20 * 4 * 9 / 10, "{placed}");
    }

    #[test]
    fn cohort_size_and_tumor_area() {
        let mut c = cfg(12);
        c.subjects = 50;
        let cohort = generate_cohort(&c).unwrap();
        assert_eq!(cohort.len(), 50);
        let (lo, hi) = c.semi_axes;
        let pixels = (c.height * c.width) as f64;
        let pi = core::f64::consts::PI;
        let mut total = 0.0;
        for v in &cohort {
            let area = v.mask().data().iter().filter(|&&m| m == 1).count() as f64;
            assert!(area >= 1.0);
            // pixel-grid slack of one perimeter's worth either way
            assert!(area >= pi * (lo - 1.0) * (lo - 1.0) && area <= pi * (hi + 1.0) * (hi + 1.0), "{area}");
            total += area / pixels;
        }
        let mean = total / 50.0;
        assert!(mean > pi * lo * lo / pixels && mean < pi * hi * hi / pixels, "{mean}");
    }

    #[test]
    fn realistic_cohort_patch_count_order() {
        // One sample per pixel location per subject on an MR-sized matrix.
        let c = PhantomConfig {
            height: 448,
            width: 448,
            subjects: 50,
            ..cfg(0)
        };
        let mods = c.modalities();
        let mut n = 0usize;
        for i in 0..c.subjects {
            let v = generate_subject(&c, i).unwrap();
            let it = enumerate_patches(&v, &mods).unwrap();
            let (lo, hi) = it.size_hint();
            assert_eq!(Some(lo), hi);
            n += lo;
        }
        assert_eq!(n, 50 * 448 * 448);
        let order = libm::log10(n as f64);
        assert!((order - 7.0).abs() < 0.5, "{n}");
    }

    #[test]
    fn single_modality_config() {
        let mut c = cfg(0);
        c.contrast.retain(|m, _| m == "T2");
        let v = generate_subject(&c, 0).unwrap();
        assert_eq!(v.modalities().len(), 1);
        assert_eq!(c.modalities(), vec!["T2".to_string()]);
    }
}

//! Run configuration.
//!
//! ```text
//! cohort = cohort            # relative to this file
//! out = results
//! modalities = PET, CT, T2
//! schemes = type1, type2, type3, single
//! combinations = PET+CT+T2; PET+CT   # fusion inputs, default: all modalities
//! folds = 5
//! n_per_class = 2000
//! seed = 0
//! epochs = 20
//! phantom.subjects = 20
//! phantom.contrast.PET = 0, 1.6, 0, 0.6, 1   # background, tumor, core, noise, distractors
//! phantom.corruption.PET = invert
//! ```

use std::path::{Path, PathBuf};

use fusenet_core::fusion::{BaseConfig, FusionScheme, SchemeKind};
use fusenet_core::phantom::{Contrast, PhantomConfig};

use crate::error::{Error, Result};
use crate::keyvalue::{list, parse_value, KeyValues};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cohort: Option<PathBuf>,
    pub out: PathBuf,
    pub modalities: Vec<String>,
    pub kinds: Vec<SchemeKind>,
    pub combinations: Vec<Vec<String>>,
    pub base: BaseConfig,
    pub folds: usize,
    pub n_per_class: usize,
    pub tau: f64,
    pub seed: u64,
    pub save_models: bool,
    pub phantom: PhantomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: None,
            out: PathBuf::from("out"),
            modalities: Vec::new(),
            kinds: vec![SchemeKind::Type1, SchemeKind::Type2, SchemeKind::Type3, SchemeKind::Single],
            combinations: Vec::new(),
            base: BaseConfig::default(),
            folds: 5,
            n_per_class: 2000,
            tau: 0.5,
            seed: 0,
            save_models: false,
            phantom: PhantomConfig::default(),
        }
    }
}

fn set<T: std::str::FromStr>(kv: &mut KeyValues, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = kv.take_parsed(key)? {
        *slot = v;
    }
    Ok(())
}

fn parse_contrast(key: &str, value: &str) -> Result<Contrast> {
    let parts = list(value);
    if parts.len() != 5 {
        return Err(Error::config(
            key,
            format!("expected `background, tumor, core, noise, distractors`, found `{value}`"),
        ));
    }
    Ok(Contrast {
        background: parse_value(key, &parts[0])?,
        tumor: parse_value(key, &parts[1])?,
        core: parse_value(key, &parts[2])?,
        noise: parse_value(key, &parts[3])?,
        distractors: parse_value(key, &parts[4])?,
    })
}

fn parse_phantom(kv: &mut KeyValues, seed: u64) -> Result<PhantomConfig> {
    let mut p = PhantomConfig {
        seed,
        ..PhantomConfig::default()
    };
    set(kv, "phantom.height", &mut p.height)?;
    set(kv, "phantom.width", &mut p.width)?;
    set(kv, "phantom.subjects", &mut p.subjects)?;
    set(kv, "phantom.core_fraction", &mut p.core_fraction)?;
    set(kv, "phantom.corruption_fraction", &mut p.corruption_fraction)?;
    set(kv, "phantom.seed", &mut p.seed)?;
    if let Some(v) = kv.take("phantom.semi_axes") {
        let parts = list(&v);
        if parts.len() != 2 {
            return Err(Error::config("phantom.semi_axes", format!("expected `min, max`, found `{v}`")));
        }
        p.semi_axes = (parse_value("phantom.semi_axes", &parts[0])?, parse_value("phantom.semi_axes", &parts[1])?);
    }
    if let Some(v) = kv.take("phantom.modalities") {
        let keep = list(&v);
        for m in &keep {
            if !p.contrast.contains_key(m) {
                return Err(Error::config("phantom.modalities", format!("no default contrast for `{m}`")));
            }
        }
        p.contrast.retain(|m, _| keep.contains(m));
    }
    for (m, v) in kv.take_prefixed("phantom.contrast.") {
        let c = parse_contrast(&format!("phantom.contrast.{m}"), &v)?;
        p.contrast.insert(m, c);
    }
    for (m, v) in kv.take_prefixed("phantom.corruption.") {
        let key = format!("phantom.corruption.{m}");
        p.corruption.insert(m, parse_value(&key, &v)?);
    }
    p.validate().map_err(|e| Error::config("phantom", e.to_string()))?;
    Ok(p)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_keys(KeyValues::load(path)?)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::from_keys(KeyValues::parse(path, text)?)
    }

    fn from_keys(mut kv: KeyValues) -> Result<Self> {
        let mut c = RunConfig {
            cohort: kv.take_path("cohort"),
            ..RunConfig::default()
        };
        if let Some(out) = kv.take_path("out") {
            c.out = out;
        }
        set(&mut kv, "seed", &mut c.seed)?;
        c.base.seed = c.seed;
        if let Some(v) = kv.take("modalities") {
            c.modalities = list(&v);
        }
        if let Some(v) = kv.take("schemes") {
            c.kinds = list(&v)
                .iter()
                .map(|s| parse_value("schemes", s))
                .collect::<Result<Vec<SchemeKind>>>()?;
        }
        if let Some(v) = kv.take("combinations") {
            c.combinations = v
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|combo| combo.split('+').map(|m| m.trim().to_string()).collect())
                .collect();
        }
        set(&mut kv, "folds", &mut c.folds)?;
        set(&mut kv, "n_per_class", &mut c.n_per_class)?;
        set(&mut kv, "tau", &mut c.tau)?;
        set(&mut kv, "save_models", &mut c.save_models)?;
        set(&mut kv, "conv1_filters", &mut c.base.conv1_filters)?;
        set(&mut kv, "conv2_filters", &mut c.base.conv2_filters)?;
        set(&mut kv, "dense_width", &mut c.base.dense_width)?;
        set(&mut kv, "learning_rate", &mut c.base.learning_rate)?;
        set(&mut kv, "momentum", &mut c.base.momentum)?;
        set(&mut kv, "batch_size", &mut c.base.batch_size)?;
        set(&mut kv, "epochs", &mut c.base.epochs)?;
        c.phantom = parse_phantom(&mut kv, c.seed)?;
        kv.finish()?;
        if c.modalities.is_empty() {
            c.modalities = c.phantom.modalities();
        }
        c.validate()?;
        Ok(c)
    }

    /// Fusion inputs; all configured modalities when none are listed.
    pub fn fusion_combinations(&self) -> Vec<Vec<String>> {
        if self.combinations.is_empty() {
            vec![self.modalities.clone()]
        } else {
            self.combinations.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "at least one modality is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(m) {
                return Err(Error::config("modalities", format!("`{m}` listed twice")));
            }
        }
        if self.kinds.is_empty() {
            return Err(Error::config("schemes", "at least one scheme is required"));
        }
        for combo in &self.combinations {
            for m in combo {
                if !self.modalities.contains(m) {
                    return Err(Error::config(
                        "combinations",
                        format!("`{m}` is not one of the configured modalities"),
                    ));
                }
            }
        }
        self.schemes()?;
        self.base.validate().map_err(|e| {
            // core messages lead with the offending field name
            let msg = e.to_string();
            let field = msg.split_whitespace().next().unwrap_or("network").to_string();
            Error::config(field, msg)
        })?;
        if self.folds < 2 {
            return Err(Error::config("folds", format!("need at least 2, got {}", self.folds)));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", format!("must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    /// Every scheme the run evaluates: fusion kinds once per combination,
    /// the single baseline once per modality.
    pub fn schemes(&self) -> Result<Vec<FusionScheme>> {
        let mut out: Vec<FusionScheme> = Vec::new();
        for &kind in &self.kinds {
            let candidates = if kind == SchemeKind::Single {
                self.modalities.iter().map(|m| FusionScheme::single(m.clone())).collect()
            } else {
                self.fusion_combinations()
                    .into_iter()
                    .map(|combo| {
                        FusionScheme::new(kind, combo.clone()).map_err(|e| {
                            Error::config("combinations", format!("{} with {}: {e}", kind.name(), combo.join("+")))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            for s in candidates {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        Ok(out)
    }

    pub fn cohort_dir(&self) -> Result<&Path> {
        self.cohort
            .as_deref()
            .ok_or_else(|| Error::config("cohort", "no cohort directory configured"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fusenet_core::phantom::Corruption;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(Path::new("/runs/a.conf"), text)
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("cohort = data\nmodalities = PET, CT, T2\nepochs = 3\nseed = 9\n").unwrap();
        assert_eq!(c.cohort.as_deref(), Some(Path::new("/runs/data")));
        assert_eq!(c.base.epochs, 3);
        assert_eq!(c.base.seed, 9);
        assert_eq!(c.phantom.seed, 9);
        let names: Vec<String> = c.schemes().unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(
            names,
            [
                "type1[PET+CT+T2]",
                "type2[PET+CT+T2]",
                "type3[PET+CT+T2]",
                "single[PET]",
                "single[CT]",
                "single[T2]"
            ]
        );
    }

    #[test]
    fn combinations_expand_per_kind() {
        let c = parse("modalities = PET, CT, T1, T2\nschemes = type1, type3\ncombinations = PET+CT+T2; PET+CT+T1\n")
            .unwrap();
        assert_eq!(c.schemes().unwrap().len(), 4);
    }

    #[test]
    fn incompatibilities_name_the_field() {
        let cases = [
            ("modalities = PET\nschemes = type1\n", "combinations"),
            ("modalities = PET, CT\ncombinations = PET+MR\n", "combinations"),
            ("modalities = PET, PET\n", "modalities"),
            ("modalities = PET, CT\nschemes = type4\n", "schemes"),
            ("modalities = PET, CT\nfolds = 1\n", "folds"),
            ("modalities = PET, CT\ntau = 1.5\n", "tau"),
            ("modalities = PET, CT\nepochs = 0\n", "epochs"),
            ("modalities = PET, CT\nmomentum = 1.0\n", "momentum"),
            ("phantom.contrast.PET = 1, 2, 3\n", "phantom.contrast.PET"),
            ("phantom.core_fraction = 1.0\n", "phantom"),
            ("phantom.corruption.PET = melt\n", "phantom.corruption.PET"),
        ];
        for (text, field) in cases {
            let e = parse(text).unwrap_err();
            match &e {
                Error::Config { field: f, .. } => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other}"),
            }
            assert_eq!(e.exit_code(), 1);
        }
    }

    #[test]
    fn unknown_key_is_a_syntax_error() {
        let e = parse("modalities = PET\nepoch = 3\n").unwrap_err();
        assert!(matches!(e, Error::Syntax { line: 2, .. }), "{e}");
    }

    #[test]
    fn phantom_keys() {
        let c = parse(
            "phantom.subjects = 7\nphantom.modalities = PET, T2\nphantom.contrast.T2 = 0, 2, 2, 0.1, 0\n\
             phantom.corruption.PET = invert\nphantom.semi_axes = 6, 9\n",
        )
        .unwrap();
        assert_eq!(c.phantom.subjects, 7);
        assert_eq!(c.phantom.contrast.len(), 2);
        assert_eq!(c.phantom.contrast["T2"].tumor, 2.0);
        assert_eq!(c.phantom.corruption["PET"], Corruption::Invert);
        assert_eq!(c.phantom.semi_axes, (6.0, 9.0));
        assert_eq!(c.modalities, ["PET", "T2"]);
    }
}

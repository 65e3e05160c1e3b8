//! Subject directories: a `subject.txt` manifest naming one MMIMG file per
//! modality plus a mask file, all relative to the subject directory.
//!
//! ```text
//! id = P000
//! mask = mask.mmimg
//! modality.CT = CT.mmimg
//! modality.PET = PET.mmimg
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fusenet_core::data::SubjectVolume;

use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;
use crate::mmimg::{read_image, read_mask, write_image, write_mask};

pub const MANIFEST: &str = "subject.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectManifest {
    pub subject_id: String,
    pub modalities: BTreeMap<String, PathBuf>,
    pub mask: PathBuf,
}

impl SubjectManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let mut kv = KeyValues::load(&path)?;
        let missing = |key: &str| Error::Syntax {
            path: path.clone(),
            line: 0,
            msg: format!("missing `{key}`"),
        };
        let subject_id = kv.take("id").ok_or_else(|| missing("id"))?;
        let mask = kv.take_path("mask").ok_or_else(|| missing("mask"))?;
        let modalities: BTreeMap<String, PathBuf> = kv
            .take_prefixed("modality.")
            .into_iter()
            .map(|(m, p)| (m, dir.join(p)))
            .collect();
        if modalities.is_empty() {
            return Err(missing("modality.<name>"));
        }
        kv.finish()?;
        Ok(SubjectManifest {
            subject_id,
            modalities,
            mask,
        })
    }

    pub fn read_volume(&self) -> Result<SubjectVolume> {
        let mask = read_mask(&self.mask)?;
        let mut images = BTreeMap::new();
        for (m, p) in &self.modalities {
            let img = read_image(p)?;
            if img.dims() != mask.dims() {
                return Err(Error::config(
                    format!("modality.{m}"),
                    format!(
                        "{} is {}x{} but the mask is {}x{}",
                        p.display(),
                        img.height(),
                        img.width(),
                        mask.height(),
                        mask.width()
                    ),
                ));
            }
            images.insert(m.clone(), img);
        }
        Ok(SubjectVolume::new(self.subject_id.clone(), images, mask)?)
    }
}

pub fn read_subject(dir: &Path) -> Result<SubjectVolume> {
    SubjectManifest::load(dir)?.read_volume()
}

pub fn write_subject(dir: &Path, volume: &SubjectVolume) -> Result<()> {
    let mut manifest = format!("id = {}\nmask = mask.mmimg\n", volume.subject_id());
    write_mask(&dir.join("mask.mmimg"), volume.mask())?;
    for (m, img) in volume.modalities() {
        let file = format!("{m}.mmimg");
        write_image(&dir.join(&file), img)?;
        manifest.push_str(&format!("modality.{m} = {file}\n"));
    }
    crate::error::write(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Writes each subject to `dir/<subject id>/`.
pub fn write_cohort(dir: &Path, cohort: &[SubjectVolume]) -> Result<()> {
    for v in cohort {
        write_subject(&dir.join(v.subject_id()), v)?;
    }
    Ok(())
}

/// Reads every subdirectory of `dir` that holds a manifest, in name order.
pub fn read_cohort(dir: &Path) -> Result<Vec<SubjectVolume>> {
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(MANIFEST).is_file() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::config("cohort", format!("no subject directories under {}", dir.display())));
    }
    let cohort = subdirs.iter().map(|d| read_subject(d)).collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for v in &cohort {
        if !seen.insert(v.subject_id()) {
            return Err(Error::config("cohort", format!("subject id {} appears twice", v.subject_id())));
        }
    }
    Ok(cohort)
}

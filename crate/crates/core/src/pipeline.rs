//! Manifest loading and canonicalisation.

use std::path::Path;

use crate::dataset::LabeledVolume;
use crate::volume::{read_manifest, read_volume, resample_to_canonical, ManifestRecord};
use crate::{exec, Error, Result};

/// Reads the records of `split` (all records when `None`) and resamples
/// each volume onto the `side³` canonical grid.
pub fn load_split(
    manifest: impl AsRef<Path>,
    split: Option<&str>,
    side: usize,
    num_classes: usize,
) -> Result<Vec<LabeledVolume>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let records: Vec<ManifestRecord> = read_manifest(manifest)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    if records.is_empty() {
        return Err(Error::Input(format!(
            "manifest {} has no records{}",
            manifest.display(),
            split.map(|s| format!(" in split {s:?}")).unwrap_or_default()
        )));
    }
    for r in &records {
        if r.label == 0 || r.label as usize > num_classes {
            return Err(Error::Input(format!(
                "record {} has label {} but the run has {num_classes} classes",
                r.id, r.label
            )));
        }
    }
    exec::try_map_indexed(records.len(), |i| {
        let r = &records[i];
        let raw = read_volume(base.join(&r.path))?;
        let mut volume = resample_to_canonical(&raw, side)?;
        volume.id = r.id.clone();
        volume.label = Some(r.label);
        Ok(LabeledVolume {
            id: r.id.clone(),
            class: r.label as usize - 1,
            volume,
        })
    })
}

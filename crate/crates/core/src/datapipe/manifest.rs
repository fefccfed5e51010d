//! `id,path,label,fold` CSV manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::folds::FoldPlan;
use crate::datapipe::image::{Label, LabeledImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: Label,
    /// `test`, `1`..`5`, or empty when unassigned.
    pub fold: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Id an image gets when the dataset written by [`write_image_dataset`] is
/// read back with `ingest_directory`.
pub fn dataset_id(img: &LabeledImage) -> String {
    let name = img.source_id.rsplit('/').next().unwrap_or(&img.source_id);
    format!("{}/{name}", img.label.dir_name())
}

/// Writes every image as `<dir>/<label>/<id>.png` plus `<dir>/manifest.csv`
/// with paths relative to `dir`. Manifest ids are [`dataset_id`]s, so a plan
/// computed over those ids lines up with the ingested dataset.
pub fn write_image_dataset(dir: &Path, images: &[LabeledImage], plan: Option<&FoldPlan>) -> Result<Vec<ManifestRow>> {
    for label in Label::ALL {
        let sub = dir.join(label.dir_name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let id = dataset_id(img);
        let path = format!("{id}.png");
        let full = dir.join(&path);
        img.pixels
            .save(&full)
            .map_err(|e| Error::Image { path: full.clone(), source: e })?;
        rows.push(ManifestRow {
            fold: plan.and_then(|pl| pl.assignment(&id)).unwrap_or_default(),
            id,
            path,
            label: img.label,
        });
    }
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

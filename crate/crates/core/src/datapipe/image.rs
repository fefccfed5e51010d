use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label. Class index 0 is positive (cancer), 1 is negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Positive),
            1 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: RgbImage,
    pub label: Label,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestWarning {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Every image is resized to this `(width, height)` on load.
    pub normalize_to: Option<(u32, u32)>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            normalize_to: Some((1390, 1038)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<IngestWarning>,
}

/// Loads `root/positive/*` and `root/negative/*`. Undecodable files are
/// skipped with a warning; a missing or empty class directory is an error.
pub fn ingest_directory(root: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for path in paths {
            match image::open(&path) {
                Ok(img) => {
                    let mut rgb = img.to_rgb8();
                    if let Some((w, h)) = opts.normalize_to {
                        if rgb.dimensions() != (w, h) {
                            rgb = image::imageops::resize(&rgb, w, h, FilterType::Triangle);
                        }
                    }
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    images.push(LabeledImage {
                        pixels: rgb,
                        label,
                        source_id: format!("{}/{}", label.dir_name(), stem),
                    });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    warnings.push(IngestWarning {
                        path,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(Ingested { images, warnings })
}

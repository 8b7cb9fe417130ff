//! Synthetic shapes dataset, PPM manifests and image normalization.

mod ppm;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ppm::{decode_ppm, encode_ppm, resize_nearest};
pub use synth::{
    describe, generate_dataset, render, toy_vocabulary, Color, Placement, Shape, ToySample, TOY_IMAGE_SIZE, TOY_PATCH,
};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: IMAGENET_MEAN, std: IMAGENET_STD }
    }
}

impl Normalization {
    fn map(&self, image: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let mut out = image.clone();
        let plane = image.numel() / 3;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }

    pub fn normalize(&self, image: &Tensor) -> Tensor {
        self.map(image, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, image: &Tensor) -> Tensor {
        self.map(image, |x, m, s| x * s + m)
    }
}

/// A model-ready image with its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Normalized `[3, S, S]`.
    pub image: Tensor,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_toy(samples: &[ToySample], norm: &Normalization) -> Self {
        Dataset {
            examples: samples
                .iter()
                .map(|s| Example { image: norm.normalize(&s.image), captions: s.captions.clone() })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub normalization: Normalization,
    pub entries: Vec<ManifestEntry>,
}

fn ingest(entry: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ingestion { entry: entry.into(), message: message.into() }
}

/// Loads every entry of a manifest, resizing images to `image_size` and
/// applying the manifest's normalization. Fails as a whole on the first bad
/// entry.
pub fn load_manifest(path: &Path, image_size: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| ingest(path.display().to_string(), e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| ingest(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let norm = manifest.normalization;
    if norm.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(ingest(path.display().to_string(), "normalization std must be positive"));
    }
    let mut examples = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let name = format!("entry {i} ({})", e.image.display());
        if e.captions.is_empty() {
            return Err(ingest(name, "no captions"));
        }
        let full = base.join(&e.image);
        let bytes = std::fs::read(&full).map_err(|err| ingest(name.clone(), format!("{}: {err}", full.display())))?;
        let raw = decode_ppm(&bytes).map_err(|m| ingest(name.clone(), m))?;
        let image = norm.normalize(&resize_nearest(&raw, image_size));
        examples.push(Example { image, captions: e.captions.clone() });
    }
    Ok(Dataset { examples })
}

/// Writes toy samples as PPM files plus `manifest.json` into `dir`.
pub fn write_toy_manifest(samples: &[ToySample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{:05}.ppm", s.seed_id);
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        encode_ppm(&s.image, &mut f)?;
        entries.push(ManifestEntry { image: name.into(), captions: s.captions.clone() });
    }
    let manifest = DatasetManifest { normalization: Normalization::default(), entries };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

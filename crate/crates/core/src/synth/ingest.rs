//! On-disk dataset format shared by real-data ingestion and `gen-data`:
//!
//! ```text
//! <dir>/manifest.json      {"domain_id", "class_names", "samples": [{"id", "presence"}]}
//! <dir>/images/<id>.png    8-bit grayscale, intensity = value / 255
//! <dir>/labels/<id>.png    8-bit, pixel value = class index
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ensure_valid, ClassVocabulary, Image, LabelMap, PresenceVector, SegmentationSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub presence: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain_id: String,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.into_luma8())
}

/// Load one domain directory, validating every sample against `vocab`.
pub fn load_domain_dir(dir: &Path, vocab: &ClassVocabulary) -> Result<Vec<SegmentationSample>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DomainManifest = serde_json::from_str(&text)?;
    if manifest.class_names != vocab.names() {
        return Err(Error::Config(format!(
            "{}: class names {:?} do not match vocabulary {:?}",
            manifest_path.display(),
            manifest.class_names,
            vocab.names()
        )));
    }
    manifest
        .samples
        .iter()
        .map(|entry| {
            let img = read_gray(&dir.join("images").join(format!("{}.png", entry.id)))?;
            let lab = read_gray(&dir.join("labels").join(format!("{}.png", entry.id)))?;
            let (w, h) = img.dimensions();
            let image = Image::from_vec(h as usize, w as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())?;
            let (lw, lh) = lab.dimensions();
            let labels = LabelMap::from_vec(lh as usize, lw as usize, lab.pixels().map(|p| p.0[0]).collect())?;
            let sample = SegmentationSample {
                image,
                labels,
                presence: PresenceVector::new(entry.presence.clone()),
                domain_id: manifest.domain_id.clone(),
                sample_id: entry.id.clone(),
            };
            ensure_valid(&sample, vocab)?;
            Ok(sample)
        })
        .collect()
}

/// Write samples of one domain in the ingestion layout.
pub fn write_domain_dir(dir: &Path, domain_id: &str, samples: &[SegmentationSample], vocab: &ClassVocabulary) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        ensure_valid(s, vocab)?;
        let (h, w) = s.image.dims();
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([(s.image.get(y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let lab = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([s.labels.get(y as usize, x as usize)]));
        for (sub, buf) in [("images", &img), ("labels", &lab)] {
            let p = dir.join(sub).join(format!("{}.png", s.sample_id));
            buf.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        }
        entries.push(ManifestEntry { id: s.sample_id.clone(), presence: s.presence.flags().to_vec() });
    }
    let manifest = DomainManifest { domain_id: domain_id.into(), class_names: vocab.names().to_vec(), samples: entries };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
}

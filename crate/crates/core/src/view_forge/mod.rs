//! World-view generation: source/target views, mask blocks, and the
//! synthetic image–caption corpus with its JSON-lines manifest.

mod crop;
pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crop::{
    crop_extent, make_triplet, mask_block_extent, sample_crop_spec, sample_mask_block, CropConfig,
    CropSpec, MaskBlock, SourceMode, ViewConfig, ViewTriplet, MIN_CROP_SIDE, MIN_IMAGE_SIDE,
};
pub use synth::{synth_dataset, SynthConfig};

/// 3-channel raster with values in `[0, 1]`.
pub type Raster = Rgb32FImage;

#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub id: String,
    pub image: Raster,
    pub caption: String,
}

impl RawPair {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image.dimensions();
        if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
            return Err(Error::InvalidInput(format!(
                "pair `{}`: image {w}x{h} is below {MIN_IMAGE_SIDE}px",
                self.id
            )));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::InvalidInput(format!("pair `{}`: empty caption", self.id)));
        }
        Ok(())
    }
}

pub fn raster_from_rgb8(img: &RgbImage) -> Raster {
    let (w, h) = img.dimensions();
    Raster::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|c| c as f32 / 255.0))
    })
}

pub fn raster_to_rgb8(img: &Raster) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(raster_from_rgb8(&img.to_rgb8()))
}

pub fn save_raster(img: &Raster, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    raster_to_rgb8(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub caption: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `images/<id>.png` plus `manifest.jsonl` under `dir` and returns the
/// manifest path.
pub fn write_dataset(dir: &Path, pairs: &[RawPair]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for pair in pairs {
        let rel = format!("images/{}.png", pair.id);
        save_raster(&pair.image, &dir.join(&rel))?;
        let entry = ManifestEntry {
            id: pair.id.clone(),
            image: rel,
            caption: pair.caption.clone(),
        };
        lines.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        lines.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses a JSON-lines file, skipping blank lines.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path)
}

/// Resolves a manifest-relative path.
pub(crate) fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every pair listed in a manifest.
pub fn load_pairs(manifest: &Path) -> Result<Vec<RawPair>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|entry| {
            let pair = RawPair {
                image: load_raster(&resolve(manifest, &entry.image))?,
                id: entry.id,
                caption: entry.caption,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dataset_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth_dataset(3, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let manifest = write_dataset(dir.path(), &pairs).unwrap();
        let loaded = load_pairs(&manifest).unwrap();
        assert_eq!(loaded, pairs);
    }

    #[test]
    fn missing_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        fs::write(&manifest, r#"{"id":"x","image":"images/nope.png","caption":"a cat"}"#).unwrap();
        let err = load_pairs(&manifest).unwrap_err().to_string();
        assert!(err.contains("nope.png"), "{err}");
    }

    #[test]
    fn empty_caption_is_invalid() {
        let pair = RawPair {
            id: "p".into(),
            image: Raster::new(32, 32),
            caption: "  ".into(),
        };
        assert!(pair.validate().is_err());
    }
}

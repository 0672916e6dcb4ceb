//! Crop geometry for source views and patch-grid mask blocks.

use image::imageops;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Raster, RawPair};
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: u32 = 32;
pub const MIN_CROP_SIDE: u32 = 8;
const MAX_REDRAWS: usize = 10;

/// Sampling ranges for crop scale `s_c` and aspect ratio `r_c`. Mask blocks
/// draw from the same ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale: (0.2, 0.25),
            aspect: (0.75, 1.5),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.scale;
        let (amin, amax) = self.aspect;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "crop scale range ({smin}, {smax}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "aspect range ({amin}, {amax}) must satisfy 0 < min <= max"
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> (f64, f64) {
        (
            draw_in(self.scale, rng),
            draw_in(self.aspect, rng),
        )
    }
}

fn draw_in((lo, hi): (f64, f64), rng: &mut impl Rng) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor() as u32
}

/// Placement and extent of a crop in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x: u32,
    pub y: u32,
    pub scale: f64,
    pub aspect: f64,
    pub width: u32,
    pub height: u32,
}

impl CropSpec {
    /// The crop covering the whole `w × h` image.
    pub fn identity(w: u32, h: u32) -> Self {
        Self {
            x: 0,
            y: 0,
            scale: 1.0,
            aspect: w as f64 / h as f64,
            width: w,
            height: h,
        }
    }

    pub fn area_fraction(&self, w: u32, h: u32) -> f64 {
        (self.width as f64 * self.height as f64) / (w as f64 * h as f64)
    }

    /// Cuts the crop out of `image` pixel-for-pixel.
    pub fn apply(&self, image: &Raster) -> Raster {
        imageops::crop_imm(image, self.x, self.y, self.width, self.height).to_image()
    }
}

/// Crop extent `(W_c, H_c)` with `W_c = √(s·r·W·H)` and `H_c = √(s·W·H / r)`,
/// rounded half-up and raised to the minimum crop side.
pub fn crop_extent(w: u32, h: u32, scale: f64, aspect: f64) -> Result<(u32, u32)> {
    let area = w as f64 * h as f64 * scale;
    let wc = round_half_up((area * aspect).sqrt());
    let hc = round_half_up((area / aspect).sqrt());
    if wc == 0 {
        return Err(Error::DegenerateCrop { dimension: "width" });
    }
    if hc == 0 {
        return Err(Error::DegenerateCrop { dimension: "height" });
    }
    Ok((
        wc.max(MIN_CROP_SIDE.min(w)),
        hc.max(MIN_CROP_SIDE.min(h)),
    ))
}

fn check_image_dims(w: u32, h: u32) -> Result<()> {
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {MIN_IMAGE_SIDE}px minimum"
        )));
    }
    Ok(())
}

/// Draws a crop for a `w × h` image.
///
/// Draws that overflow the image are retried up to ten times; after that the
/// aspect ratio is pulled toward 1 until the crop fits, which keeps the
/// requested area.
pub fn sample_crop_spec(w: u32, h: u32, cfg: &CropConfig, rng: &mut impl Rng) -> Result<CropSpec> {
    check_image_dims(w, h)?;
    cfg.validate()?;

    let mut last = (0.0, 0.0);
    for _ in 0..=MAX_REDRAWS {
        let (scale, aspect) = cfg.draw(rng);
        last = (scale, aspect);
        let (wc, hc) = crop_extent(w, h, scale, aspect)?;
        if wc <= w && hc <= h {
            return Ok(place(w, h, scale, aspect, wc, hc, rng));
        }
    }

    let (scale, aspect) = last;
    // Feasible aspect interval for this scale: s·W/H <= r <= W/(s·H).
    let lo = scale * w as f64 / h as f64;
    let hi = w as f64 / (scale * h as f64);
    let aspect = aspect.clamp(lo.min(hi), hi.max(lo));
    let (wc, hc) = crop_extent(w, h, scale, aspect)?;
    Ok(place(w, h, scale, aspect, wc.min(w), hc.min(h), rng))
}

fn place(w: u32, h: u32, scale: f64, aspect: f64, wc: u32, hc: u32, rng: &mut impl Rng) -> CropSpec {
    let x = rng.gen_range(0..=w - wc);
    let y = rng.gen_range(0..=h - hc);
    CropSpec {
        x,
        y,
        scale,
        aspect,
        width: wc,
        height: hc,
    }
}

/// How the source view is derived from the original image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// Random crop (the default world-view generation).
    #[default]
    Crop,
    /// The whole image is its own source view.
    Identity,
    /// Full-size source with everything outside the sampled crop zeroed.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewConfig {
    pub crop: CropConfig,
    pub source: SourceMode,
    /// Mask blocks cover the whole patch grid.
    pub predict_entire: bool,
}

/// A training unit: the source view, the action text and the target view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriplet {
    pub id: String,
    pub source_image: Raster,
    pub target_image: Raster,
    pub action_text: String,
    pub crop_spec: CropSpec,
}

pub fn make_triplet(pair: &RawPair, cfg: &ViewConfig, rng: &mut impl Rng) -> Result<ViewTriplet> {
    pair.validate()?;
    let (w, h) = pair.image.dimensions();
    let (spec, source) = match cfg.source {
        SourceMode::Identity => (CropSpec::identity(w, h), pair.image.clone()),
        SourceMode::Crop => {
            let spec = sample_crop_spec(w, h, &cfg.crop, rng)?;
            (spec, spec.apply(&pair.image))
        }
        SourceMode::Mask => {
            let spec = sample_crop_spec(w, h, &cfg.crop, rng)?;
            let mut masked = pair.image.clone();
            for (px, py, pixel) in masked.enumerate_pixels_mut() {
                let inside = px >= spec.x
                    && px < spec.x + spec.width
                    && py >= spec.y
                    && py < spec.y + spec.height;
                if !inside {
                    pixel.0 = [0.0; 3];
                }
            }
            (spec, masked)
        }
    };
    Ok(ViewTriplet {
        id: pair.id.clone(),
        source_image: source,
        target_image: pair.image.clone(),
        action_text: pair.caption.clone(),
        crop_spec: spec,
    })
}

/// Rectangular block of patch-grid positions to be predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBlock {
    pub grid: usize,
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
    pub block_scale: f64,
    pub block_aspect: f64,
}

impl MaskBlock {
    /// Every position of a `grid × grid` patch grid.
    pub fn full(grid: usize) -> Self {
        Self {
            grid,
            top: 0,
            left: 0,
            rows: grid,
            cols: grid,
            block_scale: 1.0,
            block_aspect: 1.0,
        }
    }

    /// The block a draw of `(scale, aspect)` would give, placed at the grid
    /// center (rounding toward the top-left).
    pub fn centered(grid: usize, scale: f64, aspect: f64, predict_entire: bool) -> Self {
        if predict_entire {
            return Self::full(grid);
        }
        let (rows, cols) = mask_block_extent(grid, scale, aspect, false);
        Self {
            grid,
            top: (grid - rows) / 2,
            left: (grid - cols) / 2,
            rows,
            cols,
            block_scale: scale,
            block_aspect: aspect,
        }
    }

    /// `(row, col)` positions in row-major order.
    pub fn indices(&self) -> Vec<(usize, usize)> {
        (self.top..self.top + self.rows)
            .flat_map(|r| (self.left..self.left + self.cols).map(move |c| (r, c)))
            .collect()
    }

    /// Row-major flat positions `row * grid + col`.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.indices()
            .into_iter()
            .map(|(r, c)| r * self.grid + c)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.grid * self.grid
    }
}

/// Block side lengths for a drawn `(s, r)` on a `g × g` grid.
pub fn mask_block_extent(grid: usize, scale: f64, aspect: f64, predict_entire: bool) -> (usize, usize) {
    let cells = (grid * grid) as f64;
    let mut cols = (round_half_up((scale * aspect * cells).sqrt()) as usize).clamp(1, grid);
    let mut rows = (round_half_up((scale * cells / aspect).sqrt()) as usize).clamp(1, grid);
    if !predict_entire && rows * cols == grid * grid {
        if cols >= rows {
            cols -= 1;
        } else {
            rows -= 1;
        }
    }
    (rows, cols)
}

pub fn sample_mask_block(
    grid: usize,
    cfg: &CropConfig,
    predict_entire: bool,
    rng: &mut impl Rng,
) -> Result<MaskBlock> {
    if grid < 2 {
        return Err(Error::InvalidInput(format!("patch grid side {grid} must be >= 2")));
    }
    if predict_entire {
        return Ok(MaskBlock::full(grid));
    }
    cfg.validate()?;
    let (scale, aspect) = cfg.draw(rng);
    let (rows, cols) = mask_block_extent(grid, scale, aspect, false);
    let top = rng.gen_range(0..=grid - rows);
    let left = rng.gen_range(0..=grid - cols);
    Ok(MaskBlock {
        grid,
        top,
        left,
        rows,
        cols,
        block_scale: scale,
        block_aspect: aspect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::view_forge::synth::{synth_dataset, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_crop_extent() {
        assert_eq!(crop_extent(100, 100, 0.25, 1.0).unwrap(), (50, 50));
    }

    #[test]
    fn wide_crop_extent() {
        // sqrt(0.25 * 4 * 10000) = 100, sqrt(0.25 * 10000 / 4) = 25
        assert_eq!(crop_extent(100, 100, 0.25, 4.0).unwrap(), (100, 25));
    }

    #[test]
    fn area_is_preserved_across_aspect_sweep() {
        for step in 0..=750 {
            let aspect = 0.75 + step as f64 * 0.001;
            let (wc, hc) = crop_extent(100, 100, 0.2475, aspect).unwrap();
            let frac = (wc * hc) as f64 / 10_000.0;
            assert!((0.24..=0.26).contains(&frac), "aspect {aspect}: {frac}");
        }
    }

    #[test]
    fn degenerate_crop_names_dimension() {
        let err = crop_extent(32, 32, 1e-6, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateCrop { dimension: "width" }));
        let err = crop_extent(32, 32, 1e-3, 1e-4).unwrap_err();
        assert!(matches!(err, Error::DegenerateCrop { dimension: "width" }));
        let err = crop_extent(32, 32, 1e-3, 1e4).unwrap_err();
        assert!(matches!(err, Error::DegenerateCrop { dimension: "height" }));
    }

    #[test]
    fn small_images_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_crop_spec(31, 64, &CropConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn extreme_aspect_falls_back_to_a_fitting_crop() {
        let cfg = CropConfig {
            scale: (0.5, 0.5),
            aspect: (8.0, 9.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = sample_crop_spec(40, 200, &cfg, &mut rng).unwrap();
        assert!(spec.width <= 40 && spec.height <= 200);
        assert!(spec.aspect < 8.0, "aspect was pulled toward 1");
        assert!(spec.x + spec.width <= 40 && spec.y + spec.height <= 200);
    }

    #[test]
    fn identity_crop_reproduces_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = &synth_dataset(1, &SynthConfig::default(), &mut rng)[0];
        let cfg = ViewConfig {
            crop: CropConfig {
                scale: (1.0, 1.0),
                aspect: (1.0, 1.0),
            },
            ..ViewConfig::default()
        };
        let t = make_triplet(pair, &cfg, &mut rng).unwrap();
        assert_eq!(t.source_image, t.target_image);

        let cfg = ViewConfig {
            source: SourceMode::Identity,
            ..ViewConfig::default()
        };
        let t = make_triplet(pair, &cfg, &mut rng).unwrap();
        assert_eq!(t.source_image, pair.image);
    }

    #[test]
    fn triplets_are_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = &synth_dataset(1, &SynthConfig::default(), &mut rng)[0];
        let a = make_triplet(pair, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_triplet(pair, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_source_keeps_crop_region_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = &synth_dataset(1, &SynthConfig::default(), &mut rng)[0];
        let cfg = ViewConfig {
            source: SourceMode::Mask,
            ..ViewConfig::default()
        };
        let t = make_triplet(pair, &cfg, &mut rng).unwrap();
        let s = t.crop_spec;
        assert_eq!(t.source_image.dimensions(), pair.image.dimensions());
        for (x, y, p) in t.source_image.enumerate_pixels() {
            let inside = x >= s.x && x < s.x + s.width && y >= s.y && y < s.y + s.height;
            if inside {
                assert_eq!(p, pair.image.get_pixel(x, y));
            } else {
                assert_eq!(p.0, [0.0; 3]);
            }
        }
    }

    #[test]
    fn mask_block_examples() {
        assert_eq!(mask_block_extent(16, 0.25, 1.0, false), (8, 8));
        assert_eq!(mask_block_extent(4, 0.2, 1.0, false), (2, 2));
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = sample_mask_block(4, &cfg, true, &mut rng).unwrap();
        assert_eq!(full.len(), 16);
        assert!(sample_mask_block(1, &cfg, false, &mut rng).is_err());
    }

    #[test]
    fn mask_block_offsets_cover_every_valid_position() {
        let cfg = CropConfig {
            scale: (0.2, 0.2),
            aspect: (1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let b = sample_mask_block(4, &cfg, false, &mut rng).unwrap();
            assert_eq!((b.rows, b.cols), (2, 2));
            seen.insert((b.top, b.left));
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn large_blocks_stay_strict_subsets() {
        let cfg = CropConfig {
            scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_mask_block(4, &cfg, false, &mut rng).unwrap();
        assert!(b.len() < 16 && !b.is_empty());
    }
}

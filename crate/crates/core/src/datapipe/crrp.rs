//! Copy-rotate-resize-paste augmentation.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::rotate90;
use super::Scene;
use crate::error::{Error, Result};
use crate::postprocess::{cluster8, BoundingBox, TargetRegion};
use crate::raster::{BinaryMask, Raster};
use crate::tensor::kernels::bilinear_forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrrpConfig {
    pub paste_count: usize,
    /// Inclusive `[min, max]` resize factor.
    pub scale_range: (f64, f64),
    /// Rotation angles in degrees; multiples of 90 only.
    pub angles: Vec<u32>,
    /// Background context copied around the target bounding box.
    pub margin: usize,
    /// Gap kept between the pasted window and every existing target box.
    /// At least one pixel is always kept so regions never merge.
    pub min_separation: usize,
    pub max_retries: usize,
}

impl Default for CrrpConfig {
    fn default() -> Self {
        Self {
            paste_count: 1,
            scale_range: (0.8, 1.25),
            angles: vec![0, 90, 180, 270],
            margin: 4,
            min_separation: 2,
            max_retries: 50,
        }
    }
}

impl CrrpConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale_range)));
        }
        if self.angles.is_empty() || self.angles.iter().any(|a| a % 90 != 0) {
            return Err(Error::Config(format!(
                "rotation angles must be a non-empty set of multiples of 90, got {:?}",
                self.angles
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

/// One successful paste.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub source_region: usize,
    pub angle: u32,
    pub scale: f64,
    /// Top-left `(row, col)` of the pasted window.
    pub destination: (usize, usize),
    /// `(height, width)` of the pasted window.
    pub size: (usize, usize),
    /// Foreground pixels added to the mask.
    pub target_pixels: usize,
    /// Box of the pasted foreground, `[r0, c0, r1, c1]` inclusive.
    pub target_bbox: [usize; 4],
}

/// A paste that was abandoned; the scene is left as it was before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteFailure {
    pub paste_index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrrpLog {
    pub scene_id: String,
    pub pastes: Vec<PasteRecord>,
    pub failures: Vec<PasteFailure>,
}

fn nearest_resize(mask: &BinaryMask, oh: usize, ow: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let src = |o: usize, out: usize, len: usize| (((o as f64 + 0.5) * len as f64 / out as f64) as usize).min(len - 1);
    Raster::from_fn(oh, ow, |r, c| mask.get(src(r, oh, h), src(c, ow, w)))
}

fn bilinear_resize(image: &Raster<f64>, oh: usize, ow: usize) -> Raster<f64> {
    let data = bilinear_forward(image.data(), 1, image.dims(), (oh, ow));
    Raster::new(oh, ow, data).expect("resize output size")
}

fn expanded(b: &BoundingBox, by: usize, h: usize, w: usize) -> BoundingBox {
    BoundingBox {
        row_min: b.row_min.saturating_sub(by),
        col_min: b.col_min.saturating_sub(by),
        row_max: (b.row_max + by).min(h - 1),
        col_max: (b.col_max + by).min(w - 1),
    }
}

fn intersects(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.row_min <= b.row_max && b.row_min <= a.row_max && a.col_min <= b.col_max && b.col_min <= a.col_max
}

struct Candidate {
    source_region: usize,
    angle: u32,
    scale: f64,
    image: Raster<f64>,
    mask: BinaryMask,
}

fn draw_candidate(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    regions: &[TargetRegion],
    cfg: &CrrpConfig,
) -> Candidate {
    let (h, w) = scene.dims();
    let source_region = rng.random_range(0..regions.len());
    let window = expanded(&regions[source_region].bbox, cfg.margin, h, w);
    let (wh, ww) = (window.row_max - window.row_min + 1, window.col_max - window.col_min + 1);
    let image = scene
        .image()
        .pixels()
        .crop(window.row_min, window.col_min, wh, ww, 0)
        .map(|v| v as f64);
    let mask = scene.mask().crop(window.row_min, window.col_min, wh, ww, false);

    let angle = cfg.angles[rng.random_range(0..cfg.angles.len())];
    let (image, mask) = (rotate90(&image, angle / 90), rotate90(&mask, angle / 90));

    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (rh, rw) = mask.dims();
    let oh = ((rh as f64 * scale).round() as usize).max(1);
    let ow = ((rw as f64 * scale).round() as usize).max(1);
    let (image, mask) = if (oh, ow) == (rh, rw) {
        (image, mask)
    } else {
        (bilinear_resize(&image, oh, ow), nearest_resize(&mask, oh, ow))
    };
    Candidate {
        source_region,
        angle,
        scale,
        image,
        mask,
    }
}

/// Pastes `cfg.paste_count` copies of randomly chosen `regions` into
/// background areas. Each paste either succeeds completely or leaves the
/// scene untouched and adds a failure record.
pub fn crrp(scene: &Scene, regions: &[TargetRegion], cfg: &CrrpConfig, seed: u64) -> Result<(Scene, CrrpLog)> {
    cfg.validate()?;
    if regions.is_empty() {
        return Err(Error::Data(format!("scene {} has no target to copy", scene.id)));
    }
    let (h, w) = scene.dims();
    if let Some(r) = regions
        .iter()
        .find(|r| r.bbox.row_max >= h || r.bbox.col_max >= w)
    {
        return Err(Error::Data(format!("region box {:?} lies outside the scene", r.bbox)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = cfg.min_separation.max(1);
    let max = scene.image().depth().max_value() as f64;
    let mut pixels = scene.image().pixels().clone();
    let mut mask = scene.mask().clone();
    let mut log = CrrpLog {
        scene_id: scene.id.clone(),
        ..CrrpLog::default()
    };

    for paste_index in 0..cfg.paste_count {
        let cand = draw_candidate(&mut rng, scene, regions, cfg);
        let fail = |reason: String, log: &mut CrrpLog| {
            warn!("crrp {}: paste {paste_index} abandoned: {reason}", scene.id);
            log.failures.push(PasteFailure { paste_index, reason });
        };
        let pasted_fg = cand.mask.count_foreground();
        if pasted_fg == 0 {
            fail("candidate target vanished after resizing".into(), &mut log);
            continue;
        }
        let (oh, ow) = cand.mask.dims();
        if oh > h || ow > w {
            fail(format!("candidate {oh}x{ow} does not fit the {h}x{w} scene"), &mut log);
            continue;
        }
        let blocked: Vec<BoundingBox> = cluster8(&mask)
            .iter()
            .map(|r| expanded(&r.bbox, gap, h, w))
            .collect();
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let row = rng.random_range(0..=h - oh);
            let col = rng.random_range(0..=w - ow);
            let window = BoundingBox {
                row_min: row,
                col_min: col,
                row_max: row + oh - 1,
                col_max: col + ow - 1,
            };
            if !blocked.iter().any(|b| intersects(b, &window)) {
                placed = Some((row, col));
                break;
            }
        }
        let Some((row, col)) = placed else {
            fail(format!("no background placement after {} tries", cfg.max_retries), &mut log);
            continue;
        };

        pixels.paste(&cand.image.map(|v| v.round().clamp(0.0, max) as u16), row, col);
        mask.paste(&cand.mask, row, col);
        let fg = regions_bbox(&cand.mask);
        log.pastes.push(PasteRecord {
            source_region: cand.source_region,
            angle: cand.angle,
            scale: cand.scale,
            destination: (row, col),
            size: (oh, ow),
            target_pixels: pasted_fg,
            target_bbox: [row + fg.row_min, col + fg.col_min, row + fg.row_max, col + fg.col_max],
        });
    }
    let image = scene.image().with_pixels(pixels);
    Ok((Scene::new(scene.id.clone(), image, mask)?, log))
}

fn regions_bbox(mask: &BinaryMask) -> BoundingBox {
    let mut b = BoundingBox {
        row_min: usize::MAX,
        col_min: usize::MAX,
        row_max: 0,
        col_max: 0,
    };
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                b.row_min = b.row_min.min(r);
                b.col_min = b.col_min.min(c);
                b.row_max = b.row_max.max(r);
                b.col_max = b.col_max.max(c);
            }
        }
    }
    b
}

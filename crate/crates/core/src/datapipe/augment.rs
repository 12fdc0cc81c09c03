use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Mirror left-right.
pub fn flip_horizontal<P: Copy>(r: &Raster<P>) -> Raster<P> {
    let w = r.width();
    Raster::from_fn(r.height(), w, |row, col| r.get(row, w - 1 - col))
}

/// Mirror top-bottom.
pub fn flip_vertical<P: Copy>(r: &Raster<P>) -> Raster<P> {
    let h = r.height();
    Raster::from_fn(h, r.width(), |row, col| r.get(h - 1 - row, col))
}

/// Counter-clockwise rotation by `quarter_turns · 90°`.
pub fn rotate90<P: Copy>(r: &Raster<P>, quarter_turns: u32) -> Raster<P> {
    let (h, w) = r.dims();
    match quarter_turns % 4 {
        0 => r.clone(),
        1 => Raster::from_fn(w, h, |row, col| r.get(col, w - 1 - row)),
        2 => Raster::from_fn(h, w, |row, col| r.get(h - 1 - row, w - 1 - col)),
        _ => Raster::from_fn(w, h, |row, col| r.get(h - 1 - col, row)),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with a normalised kernel of radius `⌈3σ⌉` and
/// replicated borders.
pub fn gaussian_blur(r: &Raster<f64>, sigma: f64) -> Raster<f64> {
    if sigma <= 0.0 {
        return r.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = r.dims();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let rows = Raster::from_fn(h, w, |row, col| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * r.get(row, clamp(col as isize + k as isize - radius, w)))
            .sum::<f64>()
    });
    Raster::from_fn(h, w, |row, col| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * rows.get(clamp(row as isize + k as isize - radius, h), col))
            .sum()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            blur_probability: 0.5,
            blur_sigma: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.flip_probability) || !p_ok(self.blur_probability) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Config("blur sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which transforms were applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub blur: bool,
}

/// Random flips on image and mask together, then optional blur on the image.
pub fn classic_augment(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> Result<(Scene, AugmentRecord)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = AugmentRecord {
        horizontal_flip: rng.random_bool(cfg.flip_probability),
        vertical_flip: rng.random_bool(cfg.flip_probability),
        blur: rng.random_bool(cfg.blur_probability),
    };
    let mut pixels = scene.image().pixels().clone();
    let mut mask = scene.mask().clone();
    if record.horizontal_flip {
        pixels = flip_horizontal(&pixels);
        mask = flip_horizontal(&mask);
    }
    if record.vertical_flip {
        pixels = flip_vertical(&pixels);
        mask = flip_vertical(&mask);
    }
    if record.blur {
        let max = scene.image().depth().max_value() as f64;
        let blurred = gaussian_blur(&pixels.map(|v| v as f64), cfg.blur_sigma);
        pixels = blurred.map(|v| v.round().clamp(0.0, max) as u16);
    }
    let image = scene.image().with_pixels(pixels);
    Ok((Scene::new(scene.id.clone(), image, mask)?, record))
}

//! Synthetic infrared scenes: noisy cluttered sea background with small
//! Gaussian targets and their exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{scene_seed, BitDepth, GrayImage, Scene};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::tensor::kernels::bilinear_forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    /// Inclusive range of targets per scene.
    pub count: (usize, usize),
    /// Inclusive range of target extent (ellipse diameter) in pixels.
    pub extent: (f64, f64),
    /// Peak amplitude over the noise standard deviation.
    pub peak_snr: f64,
    /// Pixels kept between target bounding boxes.
    pub min_separation: usize,
    pub max_attempts: usize,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            count: (1, 3),
            extent: (2.0, 6.0),
            peak_snr: 8.0,
            min_separation: 4,
            max_attempts: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Mean background level on a `[0, 1]` scale.
    pub background: f64,
    /// White noise standard deviation.
    pub sigma: f64,
    /// Amplitude of the smooth clutter field.
    pub clutter_amplitude: f64,
    /// Correlation length of the clutter in pixels.
    pub clutter_scale: f64,
    pub depth: BitDepth,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            background: 0.3,
            sigma: 0.03,
            clutter_amplitude: 0.08,
            clutter_scale: 16.0,
            depth: BitDepth::Sixteen,
        }
    }
}

impl TargetSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.extent;
        if !(1.0..=30.0).contains(&lo) || !(lo..=30.0).contains(&hi) {
            return Err(Error::Config(format!("target extent must lie in [1, 30], got {:?}", self.extent)));
        }
        if self.count.0 > self.count.1 {
            return Err(Error::Config(format!("empty target count range {:?}", self.count)));
        }
        if !(self.peak_snr > 0.0) {
            return Err(Error::Config("peak SNR must be positive".into()));
        }
        Ok(())
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.clutter_amplitude < 0.0 || !(self.clutter_scale > 0.0) {
            return Err(Error::Config("noise sigma and clutter scale must be positive".into()));
        }
        Ok(())
    }
}

/// Ellipse on the pixel grid with centre `(cr, cc)` and semi-axes `(ar, ac)`.
struct Blob {
    cr: f64,
    cc: f64,
    ar: f64,
    ac: f64,
}

impl Blob {
    fn bounds(&self) -> (usize, usize, usize, usize) {
        (
            (self.cr - self.ar).ceil() as usize,
            (self.cc - self.ac).ceil() as usize,
            (self.cr + self.ar).floor() as usize,
            (self.cc + self.ac).floor() as usize,
        )
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let dr = (r as f64 - self.cr) / self.ar;
        let dc = (c as f64 - self.cc) / self.ac;
        dr * dr + dc * dc <= 1.0
    }

    /// Gaussian profile that falls to `e^{-1.125}` on the mask boundary.
    fn intensity(&self, r: usize, c: usize) -> f64 {
        let sr = self.ar / 1.5;
        let sc = self.ac / 1.5;
        let dr = r as f64 - self.cr;
        let dc = c as f64 - self.cc;
        (-(dr * dr) / (2.0 * sr * sr) - (dc * dc) / (2.0 * sc * sc)).exp()
    }
}

fn clutter_field(rng: &mut ChaCha8Rng, size: usize, scale: f64) -> Vec<f64> {
    let coarse = (size as f64 / scale).ceil() as usize + 1;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| normal.sample(rng)).collect();
    bilinear_forward(&grid, 1, (coarse, coarse), (size, size))
}

fn place_blobs(rng: &mut ChaCha8Rng, id: &str, size: usize, spec: &TargetSpec) -> Result<Vec<Blob>> {
    let count = rng.random_range(spec.count.0..=spec.count.1);
    let gap = spec.min_separation.max(1);
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count {
        attempts += 1;
        if attempts > spec.max_attempts {
            return Err(Error::Data(format!(
                "scene {id}: could only place {} of {count} separated targets",
                blobs.len()
            )));
        }
        let (lo, hi) = spec.extent;
        let mut extent = || if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let (ar, ac) = ((extent() / 2.0).max(0.5), (extent() / 2.0).max(0.5));
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.25..=0.25);
        let lo_r = ar.ceil() as usize + 1;
        let hi_r = size - 2 - ar.ceil() as usize;
        let lo_c = ac.ceil() as usize + 1;
        let hi_c = size - 2 - ac.ceil() as usize;
        if lo_r > hi_r || lo_c > hi_c {
            continue;
        }
        let blob = Blob {
            cr: rng.random_range(lo_r..=hi_r) as f64 + jitter(rng),
            cc: rng.random_range(lo_c..=hi_c) as f64 + jitter(rng),
            ar,
            ac,
        };
        let (r0, c0, r1, c1) = blob.bounds();
        let clear = blobs.iter().all(|b| {
            let (br0, bc0, br1, bc1) = b.bounds();
            r0 > br1 + gap || br0 > r1 + gap || c0 > bc1 + gap || bc0 > c1 + gap
        });
        if clear {
            blobs.push(blob);
        }
    }
    Ok(blobs)
}

fn synth_one(id: String, size: usize, targets: &TargetSpec, noise: &NoiseSpec, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clutter = clutter_field(&mut rng, size, noise.clutter_scale);
    let blobs = place_blobs(&mut rng, &id, size, targets)?;
    let white = Normal::new(0.0, noise.sigma).expect("positive sigma");
    let amplitude = targets.peak_snr * noise.sigma;

    let mut values = Raster::from_fn(size, size, |r, c| {
        noise.background + noise.clutter_amplitude * clutter[r * size + c]
    });
    for v in values.data_mut() {
        *v += white.sample(&mut rng);
    }
    let mut mask = BinaryMask::filled(size, size, false);
    for blob in &blobs {
        let (r0, c0, r1, c1) = blob.bounds();
        let reach_r = (3.0 * blob.ar).ceil() as usize;
        let reach_c = (3.0 * blob.ac).ceil() as usize;
        let rr = r0.saturating_sub(reach_r)..=(r1 + reach_r).min(size - 1);
        for r in rr {
            for c in c0.saturating_sub(reach_c)..=(c1 + reach_c).min(size - 1) {
                let v = values.get(r, c) + amplitude * blob.intensity(r, c);
                values.set(r, c, v);
                if blob.contains(r, c) {
                    mask.set(r, c, true);
                }
            }
        }
    }
    Scene::new(id, GrayImage::from_unit(noise.depth, &values), mask)
}

/// `count` square scenes of side `size`, ids `synth_0000`, `synth_0001`, …
/// Each scene is seeded from `(seed, id)`.
pub fn synth_scenes(
    count: usize,
    size: usize,
    targets: &TargetSpec,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<Scene>> {
    if size < 32 {
        return Err(Error::Config(format!("scene size must be at least 32, got {size}")));
    }
    targets.validate()?;
    noise.validate()?;
    (0..count)
        .map(|i| {
            let id = format!("synth_{i:04}");
            let s = scene_seed(seed, &id);
            synth_one(id, size, targets, noise, s)
        })
        .collect()
}

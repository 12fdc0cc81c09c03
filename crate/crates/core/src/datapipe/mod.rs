//! Scenes, image I/O, tiling, augmentation and synthetic data.

mod augment;
mod crrp;
mod files;
mod synth;
mod tile;

pub use augment::{classic_augment, flip_horizontal, flip_vertical, gaussian_blur, rotate90, AugmentConfig, AugmentRecord};
pub use crrp::{crrp, CrrpConfig, CrrpLog, PasteFailure, PasteRecord};
pub use files::{
    load_manifest, read_image_png, read_mask_png, read_prediction_png, read_probability_raw, read_scene, save_manifest,
    write_image_png, write_mask_png, write_probability_png, write_probability_raw, ManifestEntry, Prediction, Split,
};
pub use synth::{synth_scenes, NoiseSpec, TargetSpec};
pub use tile::{stitch, tile, tile_scene, Tile, TileLayout, TileSet, MIN_TILE};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> u16 {
        match self {
            Self::Eight => u8::MAX as u16,
            Self::Sixteen => u16::MAX,
        }
    }
}

/// Grayscale image at 8 or 16 bits; samples are stored widened to `u16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    depth: BitDepth,
    pixels: Raster<u16>,
}

impl GrayImage {
    pub fn new(depth: BitDepth, pixels: Raster<u16>) -> Result<Self> {
        let max = depth.max_value();
        if pixels.data().iter().any(|&v| v > max) {
            return Err(Error::Data(format!("sample exceeds {max} for {depth:?} image")));
        }
        Ok(Self { depth, pixels })
    }

    /// Quantises values in `[0, 1]` to the full range of `depth`.
    pub fn from_unit<T: Scalar>(depth: BitDepth, values: &Raster<T>) -> Self {
        let max = depth.max_value() as f64;
        let pixels = values.map(|v| (v.as_f64().clamp(0.0, 1.0) * max).round() as u16);
        Self { depth, pixels }
    }

    pub fn depth(&self) -> BitDepth {
        self.depth
    }

    pub fn pixels(&self) -> &Raster<u16> {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    pub(crate) fn with_pixels(&self, pixels: Raster<u16>) -> Self {
        Self {
            depth: self.depth,
            pixels,
        }
    }
}

/// An image and its target mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub id: String,
    image: GrayImage,
    mask: BinaryMask,
}

impl Scene {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: BinaryMask) -> Result<Self> {
        let id = id.into();
        if image.dims() != mask.dims() {
            return Err(Error::Data(format!(
                "scene {id}: image {:?} and mask {:?} differ in size",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Self { id, image, mask })
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn into_parts(self) -> (String, GrayImage, BinaryMask) {
        (self.id, self.image, self.mask)
    }
}

/// Min-max normalisation to `[0, 1]`; a constant image maps to zero.
pub fn normalize<T: Scalar>(image: &GrayImage) -> Raster<T> {
    let data = image.pixels.data();
    let lo = data.iter().copied().min().unwrap_or(0);
    let hi = data.iter().copied().max().unwrap_or(0);
    if lo == hi {
        return image.pixels.map(|_| T::zero());
    }
    let range = (hi - lo) as f64;
    image.pixels.map(|v| T::of((v - lo) as f64 / range))
}

/// Seed for work on one scene, derived from the run seed and the scene id so
/// that serial and parallel runs agree.
pub fn scene_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the seed bytes and the id, then a splitmix finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

//! PNG images and dataset manifests.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{BitDepth, GrayImage, Scene};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::raster::{BinaryMask, ProbabilityMap, Raster};
use crate::scalar::Scalar;

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)?;
    Ok(bytes.into_inner())
}

fn buffer<P: image::Primitive>(r: &Raster<P>) -> ImageBuffer<Luma<P>, Vec<P>> {
    let (h, w) = r.dims();
    ImageBuffer::from_raw(w as u32, h as u32, r.data().to_vec()).expect("buffer size matches raster")
}

pub fn write_image_png(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let dynamic = match image.depth() {
        BitDepth::Eight => DynamicImage::ImageLuma8(buffer(&image.pixels().map(|v| v as u8))),
        BitDepth::Sixteen => DynamicImage::ImageLuma16(buffer(image.pixels())),
    };
    write_atomic(path, &encode(dynamic)?)
}

/// 8-bit `{0, 255}` mask.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode(DynamicImage::ImageLuma8(buffer(&mask.to_levels())))?)
}

/// 16-bit map with values `round(p · 65535)`.
pub fn write_probability_png<T: Scalar>(path: impl AsRef<Path>, map: &ProbabilityMap<T>) -> Result<()> {
    let levels = map
        .values
        .map(|p| (p.as_f64() * u16::MAX as f64).round() as u16);
    write_atomic(path, &encode(DynamicImage::ImageLuma16(buffer(&levels)))?)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn raster_of<P: image::Primitive>(img: ImageBuffer<Luma<P>, Vec<P>>) -> Raster<P> {
    let (w, h) = img.dimensions();
    Raster::new(h as usize, w as usize, img.into_raw()).expect("decoded size")
}

/// Grayscale PNG at 8 or 16 bits.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => GrayImage::new(BitDepth::Eight, raster_of(buf).map(u16::from)),
        DynamicImage::ImageLuma16(buf) => GrayImage::new(BitDepth::Sixteen, raster_of(buf)),
        other => Err(Error::Data(format!(
            "{}: expected a grayscale image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Any non-zero level is foreground.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => Ok(BinaryMask::from_levels(&raster_of(buf))),
        other => Err(Error::Data(format!(
            "{}: masks must be 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// A stored prediction: a 16-bit probability map or an 8-bit binary mask.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Map(ProbabilityMap<f64>),
    Mask(BinaryMask),
}

/// Inverse of [`write_probability_png`] for 16-bit files; 8-bit files are
/// read as masks.
pub fn read_prediction_png(path: impl AsRef<Path>) -> Result<Prediction> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma16(buf) => Ok(Prediction::Map(ProbabilityMap::from_raster(
            raster_of(buf).map(|v| v as f64 / u16::MAX as f64),
        ))),
        DynamicImage::ImageLuma8(buf) => Ok(Prediction::Mask(BinaryMask::from_levels(&raster_of(buf)))),
        other => Err(Error::Data(format!(
            "{}: expected a grayscale prediction, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

const RAW_MAGIC: &[u8; 8] = b"MTUPF32\0";

/// Exact dump: magic, height and width as little-endian `u64`, then the
/// values as little-endian `f32` in row-major order.
pub fn write_probability_raw<T: Scalar>(path: impl AsRef<Path>, map: &ProbabilityMap<T>) -> Result<()> {
    let (h, w) = map.dims();
    let mut bytes = Vec::with_capacity(24 + 4 * h * w);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&(h as u64).to_le_bytes());
    bytes.extend_from_slice(&(w as u64).to_le_bytes());
    for v in map.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_probability_raw(path: impl AsRef<Path>) -> Result<ProbabilityMap<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let bad = || Error::Data(format!("{}: not a raw probability dump", path.display()));
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(bad());
    }
    let dim = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (h, w) = (dim(8), dim(16));
    let body = &bytes[24..];
    if h.checked_mul(w).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad());
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ProbabilityMap::new(h, w, values, (0, 0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest row. Relative paths are resolved against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    write_json(path, &entries)
}

/// Entries in file order, with paths made absolute relative to the manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = read_json(path)?;
    for e in &mut entries {
        if e.image_path.is_relative() {
            e.image_path = base.join(&e.image_path);
        }
        if e.mask_path.is_relative() {
            e.mask_path = base.join(&e.mask_path);
        }
    }
    Ok(entries)
}

pub fn read_scene(entry: &ManifestEntry) -> Result<Scene> {
    Scene::new(
        entry.id.clone(),
        read_image_png(&entry.image_path)?,
        read_mask_png(&entry.mask_path)?,
    )
}

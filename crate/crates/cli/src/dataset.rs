//! Dataset and prediction directories.
//!
//! A dataset directory holds `manifest.json`, `images/<id>.png` and
//! `masks/<id>.png`. A prediction directory holds one `<id>.png` (16-bit map
//! or 8-bit mask) or `<id>.f32` raw map per image.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mtu_core::datapipe::{
    load_manifest, read_prediction_png, read_probability_raw, save_manifest, write_image_png, write_mask_png,
    ManifestEntry, Prediction, Scene, Split,
};
use mtu_core::Error;

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn entries(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(dir);
    if !path.is_file() {
        return Err(Error::Data(format!("no dataset manifest at {}", path.display())).into());
    }
    load_manifest(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn write(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let mut manifest = Vec::with_capacity(scenes.len());
    for s in scenes {
        let image_path = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask_path = PathBuf::from("masks").join(format!("{}.png", s.id));
        write_image_png(dir.join(&image_path), s.image())?;
        write_mask_png(dir.join(&mask_path), s.mask())?;
        manifest.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            mask_path,
            split: Split::Train,
        });
    }
    save_manifest(manifest_path(dir), &manifest)?;
    Ok(())
}

/// `(id, path)` of every prediction file, sorted by id.
pub fn predictions(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut found = Vec::new();
    for item in listing {
        let path = item?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("png") | Some("f32")) {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
            found.push((id.to_string(), path.clone()));
        }
    }
    found.sort();
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("two predictions for {} in {}", w[0].0, dir.display())).into());
    }
    if found.is_empty() {
        return Err(Error::Data(format!("no predictions in {}", dir.display())).into());
    }
    Ok(found)
}

pub fn read_prediction(path: &Path) -> Result<Prediction> {
    let pred = if path.extension().is_some_and(|e| e == "f32") {
        let map = read_probability_raw(path)?;
        let values = map.values.map(f64::from);
        Prediction::Map(mtu_core::ProbabilityMap::from_raster(values))
    } else {
        read_prediction_png(path)?
    };
    Ok(pred)
}

/// Ground-truth mask `<gt_dir>/<id>.png`.
pub fn gt_path(gt_dir: &Path, id: &str) -> Result<PathBuf> {
    let path = gt_dir.join(format!("{id}.png"));
    if !path.is_file() {
        return Err(Error::Data(format!("no ground truth for {id} in {}", gt_dir.display())).into());
    }
    Ok(path)
}

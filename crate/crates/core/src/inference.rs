//! Whole-image inference by tiling.

use crate::datapipe::{normalize, stitch, tile, GrayImage, Tile, TileSet};
use crate::error::Result;
use crate::model::MtuNet;
use crate::raster::{BinaryMask, ProbabilityMap, Raster};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalises the whole image, runs the network on each `input_size` tile and
/// stitches the probabilities back to the source size.
pub fn predict_image<T: Scalar>(net: &MtuNet<T>, image: &GrayImage) -> Result<ProbabilityMap<T>> {
    let s = net.config().input_size;
    let values: Raster<T> = normalize(image);
    if values.dims() == (s, s) {
        return net.predict(Tensor::new(vec![1, s, s], values.into_data())?, (0, 0));
    }
    let tiles = tile(&values, s)?;
    let mut out = TileSet {
        source_dims: tiles.source_dims,
        tile_size: tiles.tile_size,
        padding: tiles.padding,
        tiles: Vec::with_capacity(tiles.tiles.len()),
    };
    for t in tiles.tiles {
        let input = Tensor::new(vec![1, s, s], t.raster.into_data())?;
        let map = net.predict(input, t.origin)?;
        out.tiles.push(Tile {
            origin: t.origin,
            raster: map.values,
        });
    }
    Ok(ProbabilityMap::from_raster(stitch(&out)?))
}

/// Pooled pixel IoU of `p > tau` against the masks. Two empty masks count as
/// a perfect match.
pub fn pixel_iou<T: Scalar>(probs: &[T], labels: &[bool], tau: T) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        let hit = p > tau;
        inter += (hit && y) as usize;
        union += (hit || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// [`pixel_iou`] over several maps.
pub fn dataset_iou<T: Scalar>(maps: &[(ProbabilityMap<T>, &BinaryMask)], tau: T) -> f64 {
    let probs: Vec<T> = maps.iter().flat_map(|(p, _)| p.data().iter().copied()).collect();
    let labels: Vec<bool> = maps.iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
    pixel_iou(&probs, &labels, tau)
}

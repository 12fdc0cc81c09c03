use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Smallest accepted tile side.
pub const MIN_TILE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tile<P> {
    /// Top-left corner `(row, col)` in the source.
    pub origin: (usize, usize),
    pub raster: Raster<P>,
}

/// Non-overlapping grid of square tiles. Edge tiles are zero-padded on the
/// right and bottom; the padding is recorded so [`stitch`] can strip it.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSet<P> {
    pub source_dims: (usize, usize),
    pub tile_size: usize,
    /// `(bottom, right)` padding of the last tile row and column.
    pub padding: (usize, usize),
    /// Row-major over the grid.
    pub tiles: Vec<Tile<P>>,
}

/// Grid geometry, without the pixel data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub source_dims: (usize, usize),
    pub tile_size: usize,
    pub padding: (usize, usize),
    pub origins: Vec<(usize, usize)>,
}

impl<P> TileSet<P> {
    pub fn layout(&self) -> TileLayout {
        TileLayout {
            source_dims: self.source_dims,
            tile_size: self.tile_size,
            padding: self.padding,
            origins: self.tiles.iter().map(|t| t.origin).collect(),
        }
    }
}

fn padding_for(len: usize, tile: usize) -> usize {
    len.div_ceil(tile) * tile - len
}

pub fn tile<P: Copy + Default>(source: &Raster<P>, tile_size: usize) -> Result<TileSet<P>> {
    if tile_size < MIN_TILE {
        return Err(Error::Config(format!("tile size must be at least {MIN_TILE}, got {tile_size}")));
    }
    let (h, w) = source.dims();
    let mut tiles = Vec::new();
    for row in (0..h).step_by(tile_size) {
        for col in (0..w).step_by(tile_size) {
            tiles.push(Tile {
                origin: (row, col),
                raster: source.crop(row, col, tile_size, tile_size, P::default()),
            });
        }
    }
    Ok(TileSet {
        source_dims: (h, w),
        tile_size,
        padding: (padding_for(h, tile_size), padding_for(w, tile_size)),
        tiles,
    })
}

pub fn stitch<P: Copy + Default>(set: &TileSet<P>) -> Result<Raster<P>> {
    let (h, w) = set.source_dims;
    let mut out = Raster::filled(h, w, P::default());
    for t in &set.tiles {
        if t.raster.dims() != (set.tile_size, set.tile_size) {
            return Err(Error::shape(
                "stitch",
                format!("tile at {:?} is {:?}, expected side {}", t.origin, t.raster.dims(), set.tile_size),
            ));
        }
        out.paste(&t.raster, t.origin.0, t.origin.1);
    }
    Ok(out)
}

/// Tiles image and mask together. Tile ids are `{id}_r{row}_c{col}` with
/// the origin in source pixels.
pub fn tile_scene(scene: &Scene, tile_size: usize) -> Result<Vec<(Scene, (usize, usize))>> {
    let images = tile(scene.image().pixels(), tile_size)?;
    let masks = tile(scene.mask(), tile_size)?;
    images
        .tiles
        .into_iter()
        .zip(masks.tiles)
        .map(|(img, mask)| {
            let (row, col) = img.origin;
            let id = format!("{}_r{row}_c{col}", scene.id);
            let tile = Scene::new(id, scene.image().with_pixels(img.raster), mask.raster)?;
            Ok((tile, (row, col)))
        })
        .collect()
}

//! Row-major 2D rasters shared by post-processing, metrics and the data
//! pipeline.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major 2D grid. Dimensions are always given as `(height, width)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster<P> {
    height: usize,
    width: usize,
    data: Vec<P>,
}

impl<P: Copy> Raster<P> {
    pub fn new(height: usize, width: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "raster",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: P) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> P {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: P) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    pub fn map<Q: Copy>(&self, f: impl FnMut(P) -> Q) -> Raster<Q> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// `height × width` window at `(row, col)`; cells outside the source
    /// take `fill`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize, fill: P) -> Self {
        Self::from_fn(height, width, |r, c| {
            let (sr, sc) = (row + r, col + c);
            if sr < self.height && sc < self.width {
                self.get(sr, sc)
            } else {
                fill
            }
        })
    }

    /// Copies `patch` into `self` with its top-left corner at `(row, col)`,
    /// clipping anything that falls outside.
    pub fn paste(&mut self, patch: &Raster<P>, row: usize, col: usize) {
        for r in 0..patch.height {
            let dr = row + r;
            if dr >= self.height {
                break;
            }
            for c in 0..patch.width {
                let dc = col + c;
                if dc >= self.width {
                    break;
                }
                self.set(dr, dc, patch.get(r, c));
            }
        }
    }
}

/// Foreground/background raster.
pub type BinaryMask = Raster<bool>;

impl Raster<bool> {
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixels `> 0` are foreground.
    pub fn from_levels(levels: &Raster<u8>) -> Self {
        levels.map(|v| v > 0)
    }

    /// `{0, 255}` levels for 8-bit mask images.
    pub fn to_levels(&self) -> Raster<u8> {
        self.map(|b| if b { 255 } else { 0 })
    }
}

/// Per-pixel detection probability with the position of its patch inside the
/// source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub values: Raster<T>,
    pub origin: (usize, usize),
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Values are clamped into `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<T>, origin: (usize, usize)) -> Self {
        assert_eq!(values.len(), height * width, "probability map size");
        let values = values
            .into_iter()
            .map(|v| v.max(T::zero()).min(T::one()))
            .collect();
        Self {
            values: Raster {
                height,
                width,
                data: values,
            },
            origin,
        }
    }

    pub fn from_raster(values: Raster<T>) -> Self {
        let (h, w) = values.dims();
        Self::new(h, w, values.into_data(), (0, 0))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn data(&self) -> &[T] {
        self.values.data()
    }
}

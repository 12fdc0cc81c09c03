//! Thresholding and 8-connected target clustering.

use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, ProbabilityMap};
use crate::scalar::Scalar;

/// Foreground where `p > tau`.
pub fn threshold<T: Scalar>(map: &ProbabilityMap<T>, tau: T) -> BinaryMask {
    map.values.map(|p| p > tau)
}

/// `max(0.7·max P, 0.5·σ + mean)` with the population standard deviation.
pub fn adaptive_threshold<T: Scalar>(map: &ProbabilityMap<T>) -> T {
    let data = map.data();
    let n = T::of(data.len() as f64);
    let max = data.iter().copied().fold(T::neg_infinity(), T::max);
    let mean = data.iter().copied().sum::<T>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (T::of(0.7) * max).max(T::of(0.5) * var.sqrt() + mean)
}

/// Inclusive bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

/// One 8-connected foreground component.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRegion {
    /// `(row, col)` in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Mean `(row, col)` of the member pixels.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

impl TargetRegion {
    fn from_pixels(pixels: Vec<(usize, usize)>) -> Self {
        let area = pixels.len();
        let (mut sr, mut sc) = (0.0, 0.0);
        let mut bbox = BoundingBox {
            row_min: usize::MAX,
            col_min: usize::MAX,
            row_max: 0,
            col_max: 0,
        };
        for &(r, c) in &pixels {
            sr += r as f64;
            sc += c as f64;
            bbox.row_min = bbox.row_min.min(r);
            bbox.col_min = bbox.col_min.min(c);
            bbox.row_max = bbox.row_max.max(r);
            bbox.col_max = bbox.col_max.max(c);
        }
        Self {
            pixels,
            area,
            centroid: (sr / area as f64, sc / area as f64),
            bbox,
        }
    }

    pub fn record(&self) -> RegionRecord {
        RegionRecord {
            area: self.area,
            centroid: [self.centroid.0, self.centroid.1],
            bbox: [
                self.bbox.row_min,
                self.bbox.col_min,
                self.bbox.row_max,
                self.bbox.col_max,
            ],
        }
    }
}

/// JSON form of a region: `{area, centroid: [r, c], bbox: [r0, c0, r1, c1]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub area: usize,
    pub centroid: [f64; 2],
    pub bbox: [usize; 4],
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller label wins so roots stay deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// 8-connected components of `mask`, ordered by their first pixel in
/// row-major order. Two-pass labelling with union-find.
pub fn cluster8(mask: &BinaryMask) -> Vec<TargetRegion> {
    let (h, w) = mask.dims();
    const NONE: usize = usize::MAX;
    let mut labels = vec![NONE; h * w];
    let mut sets = DisjointSet::new();

    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbours = [NONE; 4];
            if c > 0 {
                neighbours[0] = labels[r * w + c - 1];
            }
            if r > 0 {
                let up = (r - 1) * w;
                if c > 0 {
                    neighbours[1] = labels[up + c - 1];
                }
                neighbours[2] = labels[up + c];
                if c + 1 < w {
                    neighbours[3] = labels[up + c + 1];
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                if label == NONE {
                    label = n;
                } else {
                    sets.union(label, n);
                    label = label.min(n);
                }
            }
            if label == NONE {
                label = sets.make();
            }
            labels[r * w + c] = label;
        }
    }

    let mut slot_of_root = vec![NONE; sets.parent.len()];
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let label = labels[r * w + c];
            if label == NONE {
                continue;
            }
            let root = sets.find(label);
            if slot_of_root[root] == NONE {
                slot_of_root[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot_of_root[root]].push((r, c));
        }
    }
    groups.into_iter().map(TargetRegion::from_pixels).collect()
}

/// Paints every region back into a mask of the given size.
pub fn regions_to_mask(regions: &[TargetRegion], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::filled(height, width, false);
    for region in regions {
        for &(r, c) in &region.pixels {
            mask.set(r, c, true);
        }
    }
    mask
}

//! Detection metrics: centroid matching, Pd / Fa / IoU and ROC sweeps.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{cluster8, threshold, TargetRegion};
use crate::raster::{BinaryMask, ProbabilityMap};
use crate::scalar::Scalar;

/// Default centroid deviation radius in pixels.
pub const DEFAULT_D_THRESH: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: usize,
    pub pred: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    pub d_thresh: f64,
}

fn centroid_distance(a: &TargetRegion, b: &TargetRegion) -> f64 {
    let dr = a.centroid.0 - b.centroid.0;
    let dc = a.centroid.1 - b.centroid.1;
    (dr * dr + dc * dc).sqrt()
}

/// Greedy one-to-one matching by ascending centroid distance. Candidate
/// pairs farther than `d_thresh` are rejected; ties go to the lower ground
/// truth index, then the lower prediction index.
///
/// # Panics
/// If `d_thresh` is not positive.
pub fn match_centroids(gt: &[TargetRegion], pred: &[TargetRegion], d_thresh: f64) -> MatchResult {
    assert!(d_thresh > 0.0, "d_thresh must be positive");
    let mut candidates = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let d = centroid_distance(g, p);
            if d <= d_thresh {
                candidates.push(MatchedPair {
                    gt: gi,
                    pred: pi,
                    distance: d,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.gt.cmp(&b.gt))
            .then(a.pred.cmp(&b.pred))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !gt_used[c.gt] && !pred_used[c.pred] {
            gt_used[c.gt] = true;
            pred_used[c.pred] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| p.gt);
    let unused = |used: &[bool]| {
        used.iter()
            .enumerate()
            .filter(|(_, &u)| !u)
            .map(|(i, _)| i)
            .collect()
    };
    MatchResult {
        pairs,
        unmatched_gt: unused(&gt_used),
        unmatched_pred: unused(&pred_used),
        d_thresh,
    }
}

/// Raw counts behind Pd, Fa and IoU. Counts from several images add up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub t_correct: u64,
    pub t_all: u64,
    pub p_false: u64,
    pub p_all: u64,
    pub target_inter: u64,
    pub target_union: u64,
}

impl Add for DetectionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            t_correct: self.t_correct + o.t_correct,
            t_all: self.t_all + o.t_all,
            p_false: self.p_false + o.p_false,
            p_all: self.p_all + o.p_all,
            target_inter: self.target_inter + o.target_inter,
            target_union: self.target_union + o.target_union,
        }
    }
}

impl AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for DetectionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub pd: f64,
    pub fa: f64,
    pub iou: f64,
    #[serde(flatten)]
    pub counts: DetectionCounts,
    pub d_thresh: f64,
}

impl DetectionReport {
    pub fn from_counts(counts: DetectionCounts, d_thresh: f64) -> Result<Self> {
        if counts.t_all == 0 {
            return Err(Error::Undefined("Pd is undefined when there are no ground-truth targets"));
        }
        if counts.p_all == 0 {
            return Err(Error::Undefined("Fa is undefined for an empty image"));
        }
        let iou = if counts.target_union == 0 {
            0.0
        } else {
            counts.target_inter as f64 / counts.target_union as f64
        };
        Ok(Self {
            pd: counts.t_correct as f64 / counts.t_all as f64,
            fa: counts.p_false as f64 / counts.p_all as f64,
            iou,
            counts,
            d_thresh,
        })
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "metrics",
            format!("ground truth {:?} vs prediction {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// Counts for one image given its matching. `pred_regions` must be the
/// regions the matching was computed on.
pub fn count_detections(
    gt_mask: &BinaryMask,
    pred_mask: &BinaryMask,
    pred_regions: &[TargetRegion],
    matches: &MatchResult,
) -> Result<DetectionCounts> {
    same_dims(gt_mask, pred_mask)?;
    let p_false = matches
        .unmatched_pred
        .iter()
        .map(|&i| pred_regions[i].area as u64)
        .sum();
    let (mut inter, mut union) = (0u64, 0u64);
    for (&g, &p) in gt_mask.data().iter().zip(pred_mask.data()) {
        inter += (g && p) as u64;
        union += (g || p) as u64;
    }
    Ok(DetectionCounts {
        t_correct: matches.pairs.len() as u64,
        t_all: (matches.pairs.len() + matches.unmatched_gt.len()) as u64,
        p_false,
        p_all: gt_mask.len() as u64,
        target_inter: inter,
        target_union: union,
    })
}

pub fn compute_report(
    gt_mask: &BinaryMask,
    pred_mask: &BinaryMask,
    pred_regions: &[TargetRegion],
    matches: &MatchResult,
) -> Result<DetectionReport> {
    let counts = count_detections(gt_mask, pred_mask, pred_regions, matches)?;
    DetectionReport::from_counts(counts, matches.d_thresh)
}

/// Clusters both masks, matches them and counts.
pub fn evaluate_masks(gt_mask: &BinaryMask, pred_mask: &BinaryMask, d_thresh: f64) -> Result<DetectionCounts> {
    same_dims(gt_mask, pred_mask)?;
    let gt = cluster8(gt_mask);
    let pred = cluster8(pred_mask);
    let matches = match_centroids(&gt, &pred, d_thresh);
    count_detections(gt_mask, pred_mask, &pred, &matches)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocSample {
    pub tau: f64,
    pub pd: f64,
    pub fa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub samples: Vec<RocSample>,
}

/// Nine significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x:.8e}")
    }
}

impl RocCurve {
    fn csv(&self, header: &str, row: impl Fn(&RocSample) -> Vec<f64>) -> String {
        let mut out = String::from(header);
        out.push('\n');
        for s in &self.samples {
            let cols: Vec<String> = row(s).into_iter().map(format_sig9).collect();
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }

    /// `tau,pd,fa`
    pub fn to_csv(&self) -> String {
        self.csv("tau,pd,fa", |s| vec![s.tau, s.pd, s.fa])
    }

    pub fn fa_pd_csv(&self) -> String {
        self.csv("fa,pd", |s| vec![s.fa, s.pd])
    }

    pub fn tau_pd_csv(&self) -> String {
        self.csv("tau,pd", |s| vec![s.tau, s.pd])
    }

    pub fn tau_fa_csv(&self) -> String {
        self.csv("tau,fa", |s| vec![s.tau, s.fa])
    }
}

/// `count` evenly spaced thresholds covering `[0, 1]`.
pub fn tau_grid(count: usize) -> Vec<f64> {
    assert!(count >= 2, "a threshold grid needs at least two points");
    (0..count).map(|i| i as f64 / (count - 1) as f64).collect()
}

pub fn default_taus() -> Vec<f64> {
    tau_grid(101)
}

fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::Config("empty threshold list".into()));
    }
    if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("thresholds must lie in [0, 1]".into()));
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("thresholds must be strictly increasing".into()));
    }
    Ok(())
}

/// Per-threshold counts pooled over every `(map, gt)` pair.
pub fn roc_counts<T: Scalar>(
    scenes: &[(&ProbabilityMap<T>, &BinaryMask)],
    taus: &[f64],
    d_thresh: f64,
) -> Result<Vec<DetectionCounts>> {
    check_taus(taus)?;
    let mut pooled = vec![DetectionCounts::default(); taus.len()];
    for (map, gt) in scenes {
        if map.dims() != gt.dims() {
            return Err(Error::shape(
                "roc",
                format!("map {:?} vs mask {:?}", map.dims(), gt.dims()),
            ));
        }
        let gt_regions = cluster8(gt);
        for (slot, &tau) in pooled.iter_mut().zip(taus) {
            let pred_mask = threshold(map, T::of(tau));
            let pred = cluster8(&pred_mask);
            let matches = match_centroids(&gt_regions, &pred, d_thresh);
            *slot += count_detections(gt, &pred_mask, &pred, &matches)?;
        }
    }
    Ok(pooled)
}

/// Sweeps `taus` over every scene and pools the counts per threshold.
pub fn roc_sweep_many<T: Scalar>(
    scenes: &[(&ProbabilityMap<T>, &BinaryMask)],
    taus: &[f64],
    d_thresh: f64,
) -> Result<RocCurve> {
    let counts = roc_counts(scenes, taus, d_thresh)?;
    let samples = counts
        .into_iter()
        .zip(taus)
        .map(|(c, &tau)| {
            let r = DetectionReport::from_counts(c, d_thresh)?;
            Ok(RocSample {
                tau,
                pd: r.pd,
                fa: r.fa,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RocCurve { samples })
}

pub fn roc_sweep<T: Scalar>(map: &ProbabilityMap<T>, gt_mask: &BinaryMask, taus: &[f64]) -> Result<RocCurve> {
    roc_sweep_many(&[(map, gt_mask)], taus, DEFAULT_D_THRESH)
}

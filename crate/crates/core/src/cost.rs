//! Transport cost between ground-truth objects and anchors.
//!
//! The overlap-aware term scores each anchor's regressed box against every
//! object at once: high IoU with the target is cheap, overlap with any other
//! object is expensive unless that object itself overlaps the target. A level
//! term adds the pyramid distance between the anchor and the object's
//! preferred levels. Candidate masks restrict which pairs may carry mass;
//! everything else gets [`SENTINEL_COST`](crate::uot::SENTINEL_COST).

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{iou, pairwise_iou, BBox};
use crate::uot::SENTINEL_COST;

/// Lower clamp applied inside the logarithms of the cross-entropy terms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Cross-entropy of an IoU against target 1.
pub fn bce_positive(phi: f64) -> f64 {
    -phi.max(BCE_CLAMP).ln()
}

/// Cross-entropy of an IoU against target 0.
pub fn bce_negative(phi: f64) -> f64 {
    -(1.0 - phi).max(BCE_CLAMP).ln()
}

/// Overlap-aware cost from the object/prediction IoUs `phi` (m x n) and the
/// object/object IoUs `psi` (m x m).
pub fn overlap_aware_cost_from_ious(phi: ArrayView2<'_, f64>, psi: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, n) = phi.dim();
    if psi.dim() != (m, m) {
        return Err(Error::Dimension {
            context: "object overlap matrix",
            expected: (m, m),
            got: psi.dim(),
        });
    }
    // Per column, only objects that the prediction actually touches contribute
    // a nonzero negative term, so gather those first.
    let mut cost = Array2::zeros((m, n));
    let mut touched: Vec<(usize, f64)> = Vec::with_capacity(m);
    for j in 0..n {
        touched.clear();
        touched.extend((0..m).filter(|&k| phi[[k, j]] > 0.0).map(|k| (k, bce_negative(phi[[k, j]]))));
        for i in 0..m {
            let own = phi[[i, j]];
            let mut sum = bce_positive(own);
            for &(k, neg) in &touched {
                if k != i {
                    sum += (1.0 - psi[[i, k]]) * neg;
                }
            }
            cost[[i, j]] = (1.0 - own) * sum;
        }
    }
    Ok(cost)
}

/// Overlap-aware cost of assigning each object in `gt` to each predicted box.
pub fn overlap_aware_cost(gt: &[BBox], pred: &[BBox]) -> Result<Array2<f64>> {
    let phi = pairwise_iou(gt, pred)?;
    let psi = pairwise_iou(gt, gt)?;
    overlap_aware_cost_from_ious(phi.view(), psi.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoiRange {
    pub level: i32,
    pub min_size: f64,
    pub max_size: f64,
}

/// Per-level size-of-interest table, ordered by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoiTable(Vec<SoiRange>);

impl SoiTable {
    pub fn new(ranges: Vec<SoiRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Config("size-of-interest table is empty".into()));
        }
        for r in &ranges {
            if !(r.min_size >= 0.0 && r.min_size < r.max_size && r.max_size.is_finite()) {
                return Err(Error::Config(format!("bad size-of-interest range {r:?}")));
            }
        }
        for w in ranges.windows(2) {
            if w[1].level != w[0].level + 1 {
                return Err(Error::Config("size-of-interest levels must be contiguous".into()));
            }
            if w[1].min_size < w[0].max_size {
                return Err(Error::Config("size-of-interest ranges overlap or are unordered".into()));
            }
        }
        Ok(Self(ranges))
    }

    /// Ranges for levels 3..=7 doubling from 64 px, top level capped at 1024 px.
    pub fn default_five_level() -> Self {
        let bounds = [0.0, 64.0, 128.0, 256.0, 512.0, 1024.0];
        Self(
            (0..5)
                .map(|k| SoiRange {
                    level: 3 + k as i32,
                    min_size: bounds[k],
                    max_size: bounds[k + 1],
                })
                .collect(),
        )
    }

    pub fn ranges(&self) -> &[SoiRange] {
        &self.0
    }

    /// Validate after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.0)
    }
}

/// Preferred pyramid levels for an object: the level whose size range holds
/// `sqrt(w h)`, plus the neighbouring level when the size lies within
/// `band` (a fraction of the range width) of a shared range edge. Sizes off
/// either end of the table clamp to the end level.
pub fn preferred_levels(gt: &BBox, soi: &SoiTable, band: f64) -> Vec<i32> {
    let ranges = soi.ranges();
    let s = gt.scale();
    let first = ranges[0];
    let last = ranges[ranges.len() - 1];
    if s < first.min_size {
        return vec![first.level];
    }
    if s >= last.max_size {
        return vec![last.level];
    }
    let k = ranges
        .iter()
        .position(|r| s >= r.min_size && s < r.max_size)
        .unwrap_or_else(|| {
            // gap between ranges: take the closer edge
            ranges
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.min_size - s).abs().min((a.1.max_size - s).abs());
                    let db = (b.1.min_size - s).abs().min((b.1.max_size - s).abs());
                    da.total_cmp(&db)
                })
                .map(|(k, _)| k)
                .unwrap()
        });
    let r = ranges[k];
    let width = r.max_size - r.min_size;
    let shares_lower = k > 0 && ranges[k - 1].max_size == r.min_size;
    let shares_upper = k + 1 < ranges.len() && ranges[k + 1].min_size == r.max_size;
    if shares_lower && s - r.min_size <= band * width {
        vec![r.level - 1, r.level]
    } else if shares_upper && r.max_size - s <= band * width {
        vec![r.level, r.level + 1]
    } else {
        vec![r.level]
    }
}

/// `min over a in L_i of |a - l_j|`.
pub fn level_cost(gt_levels: &[Vec<i32>], anchor_levels: &[i32]) -> Result<Array2<f64>> {
    if let Some(i) = gt_levels.iter().position(|l| l.is_empty()) {
        return Err(Error::Config(format!("object {i} has no preferred level")));
    }
    Ok(Array2::from_shape_fn((gt_levels.len(), anchor_levels.len()), |(i, j)| {
        gt_levels[i]
            .iter()
            .map(|a| (a - anchor_levels[j]).abs())
            .min()
            .unwrap() as f64
    }))
}

/// `gamma * c_iou + c_level`.
pub fn combine_costs(c_iou: ArrayView2<'_, f64>, c_level: ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>> {
    if c_iou.dim() != c_level.dim() {
        return Err(Error::Dimension {
            context: "combine_costs",
            expected: c_iou.dim(),
            got: c_level.dim(),
        });
    }
    Ok(Zip::from(&c_iou).and(&c_level).map_collect(|&u, &l| gamma * u + l))
}

/// Which (object, anchor) pairs take part in the transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub mask: Array2<bool>,
}

impl CandidateMask {
    pub fn all(m: usize, n: usize) -> Self {
        Self {
            mask: Array2::from_elem((m, n), true),
        }
    }

    pub fn count_per_object(&self) -> Vec<usize> {
        self.mask.rows().into_iter().map(|r| r.iter().filter(|v| **v).count()).collect()
    }

    /// Objects without a single candidate anchor.
    pub fn degenerate_objects(&self) -> Vec<usize> {
        self.count_per_object()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_objects().is_empty()
    }

    /// Copy of `cost` with every excluded pair set to the sentinel.
    pub fn apply(&self, cost: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if cost.dim() != self.mask.dim() {
            return Err(Error::Dimension {
                context: "candidate mask",
                expected: self.mask.dim(),
                got: cost.dim(),
            });
        }
        Ok(Zip::from(&cost)
            .and(&self.mask)
            .map_collect(|&c, &keep| if keep { c } else { SENTINEL_COST }))
    }
}

/// Per object and per level, the `r * r` anchors whose centers are closest to
/// the object center (ties by anchor index).
pub fn center_prior_candidates(gt: &[BBox], grid: &AnchorGrid, r: usize) -> Result<CandidateMask> {
    if r == 0 {
        return Err(Error::Config("center prior radius must be >= 1".into()));
    }
    let take = r * r;
    let mut mask = Array2::from_elem((gt.len(), grid.len()), false);
    let mut scratch: Vec<(f64, usize)> = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        let (gx, gy) = g.center();
        for lv in &grid.levels {
            let count = lv.rows * lv.cols;
            scratch.clear();
            scratch.extend((lv.offset..lv.offset + count).map(|j| {
                let a = &grid.anchors[j];
                ((a.cx - gx).powi(2) + (a.cy - gy).powi(2), j)
            }));
            let order = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
            if scratch.len() > take {
                scratch.select_nth_unstable_by(take - 1, order);
                scratch.truncate(take);
            }
            for &(_, j) in scratch.iter() {
                mask[[i, j]] = true;
            }
        }
    }
    Ok(CandidateMask { mask })
}

/// Pairs whose prior-box IoU exceeds `threshold`.
pub fn iou_threshold_candidates(gt: &[BBox], anchor_boxes: &[BBox], threshold: f64) -> Result<CandidateMask> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("IoU threshold must lie in [0, 1), got {threshold}")));
    }
    Ok(CandidateMask {
        mask: Array2::from_shape_fn((gt.len(), anchor_boxes.len()), |(i, j)| {
            iou(&gt[i], &anchor_boxes[j]) > threshold
        }),
    })
}

//! Greedy non-maximum suppression with a fixed threshold, and the
//! density-guided variant whose per-box threshold rises with local density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Lowest and highest adaptive threshold.
pub const THRESHOLD_FLOOR: f64 = 0.5;
pub const THRESHOLD_SPAN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub density: f64,
}

/// Shape applied to the min-max scaled density before it sets the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleVariant {
    Square,
    #[default]
    Linear,
    Sqrt,
}

impl ScaleVariant {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            ScaleVariant::Square => s * s,
            ScaleVariant::Linear => s,
            ScaleVariant::Sqrt => s.sqrt(),
        }
    }
}

impl std::str::FromStr for ScaleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" | "s2" | "s²" => Ok(ScaleVariant::Square),
            "linear" | "s" => Ok(ScaleVariant::Linear),
            "sqrt" | "√s" => Ok(ScaleVariant::Sqrt),
            _ => Err(Error::Config(format!("unknown density scaling variant '{s}'"))),
        }
    }
}

/// Min-max scaling frozen on the initial detection set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityScaler {
    pub d_min: f64,
    pub d_max: f64,
    pub variant: ScaleVariant,
}

impl DensityScaler {
    /// Scaled density in `[0, 1]`; identically zero when the range is empty.
    pub fn scale(&self, d: f64) -> f64 {
        if self.d_max <= self.d_min {
            return 0.0;
        }
        ((d - self.d_min) / (self.d_max - self.d_min)).clamp(0.0, 1.0)
    }
}

pub fn build_scaler(detections: &[Detection], variant: ScaleVariant) -> Result<DensityScaler> {
    if detections.is_empty() {
        return Err(Error::EmptyInput("density scaler needs at least one detection"));
    }
    let (d_min, d_max) = detections
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d.density), hi.max(d.density)));
    Ok(DensityScaler { d_min, d_max, variant })
}

/// `0.5 + 0.3 f(s(d))`.
pub fn adaptive_threshold(d: f64, scaler: &DensityScaler) -> f64 {
    THRESHOLD_FLOOR + THRESHOLD_SPAN * scaler.variant.apply(scaler.scale(d))
}

/// Multiplier applied to a surviving box's density after the box it overlaps
/// by `overlap` is kept.
pub fn decay_factor(overlap: f64, sigma: f64) -> f64 {
    (-overlap * overlap / sigma).exp()
}

/// Indices sorted by score descending, ties by index.
fn score_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    order
}

/// Indices of the detections kept by greedy suppression at a fixed threshold,
/// in score order.
pub fn vanilla_nms_indices(detections: &[Detection], threshold: f64) -> Vec<usize> {
    let mut pending = score_order(detections);
    let mut kept = Vec::new();
    while !pending.is_empty() {
        let t = pending.remove(0);
        kept.push(t);
        let target = detections[t].bbox;
        pending.retain(|&i| iou(&target, &detections[i].bbox) <= threshold);
    }
    kept
}

pub fn vanilla_nms(detections: &[Detection], threshold: f64) -> Result<Vec<Detection>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("NMS threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(vanilla_nms_indices(detections, threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect())
}

/// Kept indices in score order, plus each kept detection's density at the
/// moment it was selected.
pub fn dg_nms_indices(detections: &[Detection], sigma: f64, variant: ScaleVariant) -> Result<Vec<(usize, f64)>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("decay scale must be > 0, got {sigma}")));
    }
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let scaler = build_scaler(detections, variant)?;
    let mut density: Vec<f64> = detections.iter().map(|d| d.density).collect();
    let mut pending = score_order(detections);
    let mut kept = Vec::new();
    while !pending.is_empty() {
        let t = pending.remove(0);
        kept.push((t, density[t]));
        let target = detections[t].bbox;
        pending.retain(|&i| {
            let overlap = iou(&target, &detections[i].bbox);
            if overlap > adaptive_threshold(density[i], &scaler) {
                return false;
            }
            density[i] *= decay_factor(overlap, sigma);
            true
        });
    }
    Ok(kept)
}

/// Density-guided NMS. Output is sorted by score descending and carries the
/// original detections unchanged.
pub fn dg_nms(detections: &[Detection], sigma: f64, variant: ScaleVariant) -> Result<Vec<Detection>> {
    Ok(dg_nms_indices(detections, sigma, variant)?
        .into_iter()
        .map(|(i, _)| detections[i])
        .collect())
}

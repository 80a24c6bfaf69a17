//! Anchor labels and weights decoded from a transport plan, and the forward
//! losses that consume them.
//!
//! Each row of the plan is one object's density over the anchors. Sorting a
//! row and accumulating it gives a cumulative mass curve: the head of the
//! curve becomes positives, the tail negatives, and the band in between is
//! ignored. Anchors claimed by several objects go to the object that sends
//! them the most mass.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::uot::{uot_objective, TransportPlan, TransportProblem};

/// Slack on cumulative-fraction comparisons, absorbs summation round-off.
const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignStrategy {
    /// Cumulative-mass thresholds.
    DynKStar { th_pos: f64, th_neg: f64 },
    /// Positive count per object = rounded sum of its `top` best prediction IoUs.
    DynK { top: usize },
    /// Fixed number of positives per object.
    FixK { k: usize },
}

impl Default for AssignStrategy {
    fn default() -> Self {
        AssignStrategy::DynKStar {
            th_pos: 0.7,
            th_neg: 0.8,
        }
    }
}

impl AssignStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AssignStrategy::DynKStar { th_pos, th_neg } => {
                if !(th_pos > 0.0 && th_pos <= th_neg && th_neg <= 1.0) {
                    return Err(Error::Config(format!(
                        "thresholds must satisfy 0 < th_pos <= th_neg <= 1, got {th_pos}/{th_neg}"
                    )));
                }
            }
            AssignStrategy::DynK { top: 0 } => {
                return Err(Error::Config("dyn-k needs top >= 1".into()))
            }
            AssignStrategy::FixK { k: 0 } => return Err(Error::Config("fix-k needs k >= 1".into())),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDiagnostics {
    /// Objects that received no transported mass at all.
    pub empty_objects: Vec<usize>,
    /// Objects left without a positive anchor after competition.
    pub objects_without_positives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    pub matched_gt: Vec<Option<usize>>,
    /// Filled by [`compute_weights`]; `None` for non-positive anchors.
    pub weights: Vec<Option<f64>>,
    pub diagnostics: AssignmentDiagnostics,
}

impl AssignmentResult {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn positives_of(&self, gt: usize) -> impl Iterator<Item = usize> + '_ {
        self.matched_gt
            .iter()
            .enumerate()
            .filter(move |(_, m)| **m == Some(gt))
            .map(|(j, _)| j)
    }
}

/// Anchors of one row with nonzero density, by density descending then index.
fn ranked(row: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Labels one object's row in isolation, before any cross-object competition.
///
/// An anchor is positive when the inclusive cumulative fraction at its rank is
/// at most `th_pos`, negative when it exceeds `th_neg`, ignored otherwise. The
/// top-ranked anchor is always positive. Zero-density anchors are negative.
pub fn row_labels(row: ArrayView1<'_, f64>, th_pos: f64, th_neg: f64) -> Vec<Label> {
    let mut labels = vec![Label::Negative; row.len()];
    let order = ranked(row);
    let total: f64 = order.iter().map(|&j| row[j]).sum();
    if total <= 0.0 {
        return labels;
    }
    let mut cumulative = 0.0;
    for (rank, &j) in order.iter().enumerate() {
        cumulative += row[j];
        let fraction = cumulative / total;
        labels[j] = if rank == 0 || fraction <= th_pos + THRESHOLD_SLACK {
            Label::Positive
        } else if fraction > th_neg + THRESHOLD_SLACK {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    labels
}

fn top_k_labels(row: ArrayView1<'_, f64>, k: usize) -> Vec<Label> {
    let mut labels = vec![Label::Negative; row.len()];
    for &j in ranked(row).iter().take(k) {
        labels[j] = Label::Positive;
    }
    labels
}

/// Decode with the cumulative-mass thresholds.
pub fn decode_assignment(plan: &TransportPlan, th_pos: f64, th_neg: f64) -> Result<AssignmentResult> {
    decode(plan.pi.view(), &AssignStrategy::DynKStar { th_pos, th_neg }, None)
}

/// Decode labels from a plan with any strategy.
///
/// `ious` (objects x anchors, prediction IoUs) is required by
/// [`AssignStrategy::DynK`] only.
pub fn decode(
    pi: ArrayView2<'_, f64>,
    strategy: &AssignStrategy,
    ious: Option<ArrayView2<'_, f64>>,
) -> Result<AssignmentResult> {
    strategy.validate()?;
    let (m, n) = pi.dim();
    if let Some(ious) = ious {
        if ious.dim() != (m, n) {
            return Err(Error::Dimension {
                context: "decode ious",
                expected: (m, n),
                got: ious.dim(),
            });
        }
    }

    let mut diagnostics = AssignmentDiagnostics::default();
    let mut claim: Vec<Option<usize>> = vec![None; n];
    let mut ignored = vec![false; n];
    for i in 0..m {
        let row = pi.row(i);
        if row.iter().all(|v| *v <= 0.0) {
            diagnostics.empty_objects.push(i);
            continue;
        }
        let labels = match *strategy {
            AssignStrategy::DynKStar { th_pos, th_neg } => row_labels(row, th_pos, th_neg),
            AssignStrategy::FixK { k } => top_k_labels(row, k),
            AssignStrategy::DynK { top } => {
                let ious = ious.ok_or_else(|| Error::Config("dyn-k decode needs prediction IoUs".into()))?;
                let mut support: Vec<f64> = (0..n).filter(|&j| row[j] > 0.0).map(|j| ious[[i, j]]).collect();
                support.sort_by(|a, b| b.total_cmp(a));
                let k = (support.iter().take(top).sum::<f64>().round() as usize).max(1);
                top_k_labels(row, k)
            }
        };
        for (j, label) in labels.into_iter().enumerate() {
            match label {
                Label::Positive => {
                    // column competition: largest mass wins, earlier object on ties
                    let wins = match claim[j] {
                        None => true,
                        Some(prev) => pi[[i, j]] > pi[[prev, j]],
                    };
                    if wins {
                        claim[j] = Some(i);
                    }
                }
                Label::Ignore => ignored[j] = true,
                Label::Negative => {}
            }
        }
    }

    let labels: Vec<Label> = (0..n)
        .map(|j| match (claim[j], ignored[j]) {
            (Some(_), _) => Label::Positive,
            (None, true) => Label::Ignore,
            (None, false) => Label::Negative,
        })
        .collect();
    let mut has_positive = vec![false; m];
    for c in claim.iter().flatten() {
        has_positive[*c] = true;
    }
    diagnostics.objects_without_positives = (0..m).filter(|&i| !has_positive[i]).collect();
    Ok(AssignmentResult {
        labels,
        matched_gt: claim,
        weights: vec![None; n],
        diagnostics,
    })
}

/// Positive-anchor weights: each object's positive densities divided by the
/// largest of them.
pub fn compute_weights(plan: &TransportPlan, assignment: &AssignmentResult) -> Result<AssignmentResult> {
    let (m, n) = plan.pi.dim();
    if assignment.labels.len() != n {
        return Err(Error::Dimension {
            context: "compute_weights",
            expected: (m, n),
            got: (m, assignment.labels.len()),
        });
    }
    let mut max_density = vec![0.0f64; m];
    for (j, g) in assignment.matched_gt.iter().enumerate() {
        if let Some(i) = *g {
            max_density[i] = max_density[i].max(plan.pi[[i, j]]);
        }
    }
    let mut out = assignment.clone();
    for (j, g) in assignment.matched_gt.iter().enumerate() {
        out.weights[j] = g.map(|i| plan.pi[[i, j]] / max_density[i]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    /// Focal loss of confidence `p` against target 1; `p` is clipped to `[1e-7, 1]`.
    pub fn positive(&self, p: f64) -> f64 {
        let p = p.clamp(1e-7, 1.0);
        -self.alpha * (1.0 - p).powf(self.gamma) * p.ln()
    }

    /// Focal loss of confidence `p` against target 0; `p` is clipped to `[0, 1 - 1e-7]`.
    pub fn negative(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0 - 1e-7);
        -(1.0 - self.alpha) * p.powf(self.gamma) * (1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportTerm {
    /// Full regularized objective at the plan.
    #[default]
    Entropic,
    /// `<C, pi>` only.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UotLossConfig {
    pub transport: TransportTerm,
    pub object_term: bool,
    pub anchor_term: bool,
    pub focal: FocalParams,
}

impl Default for UotLossConfig {
    fn default() -> Self {
        Self {
            transport: TransportTerm::Entropic,
            object_term: true,
            anchor_term: true,
            focal: FocalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UotLoss {
    pub transport: f64,
    /// Focal loss of each object's transported mass against full assignment.
    pub object: f64,
    /// L2 distance between the reconstructed and the given anchor densities.
    pub anchor: f64,
    pub total: f64,
}

pub fn uot_loss(plan: &TransportPlan, problem: &TransportProblem, cfg: &UotLossConfig) -> Result<UotLoss> {
    let transport = match cfg.transport {
        TransportTerm::Entropic => uot_objective(plan.pi.view(), problem)?,
        TransportTerm::Plain => {
            if plan.pi.dim() != problem.shape() {
                return Err(Error::Dimension {
                    context: "uot_loss",
                    expected: problem.shape(),
                    got: plan.pi.dim(),
                });
            }
            plan.pi.iter().zip(problem.cost().iter()).map(|(p, c)| p * c).sum()
        }
    };
    let object = if cfg.object_term {
        plan.row_sums().iter().map(|&a| cfg.focal.positive(a)).sum()
    } else {
        0.0
    };
    let anchor = if cfg.anchor_term {
        let diff: Array1<f64> = plan.column_sums() - problem.b();
        diff.dot(&diff).sqrt()
    } else {
        0.0
    };
    Ok(UotLoss {
        transport,
        object,
        anchor,
        total: transport + object + anchor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalizer {
    /// Sum of positive weights.
    PositiveWeights,
    /// Sum of positive weights plus the number of negatives.
    #[default]
    PositiveWeightsPlusNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionLossConfig {
    pub focal: FocalParams,
    pub gamma1: f64,
    pub gamma2: f64,
    pub normalizer: LossNormalizer,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            gamma1: 2.0,
            gamma2: 0.25,
            normalizer: LossNormalizer::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub cls: f64,
    pub loc: f64,
    pub uot: f64,
    pub total: f64,
    pub no_positives: bool,
}

/// Weighted classification and GIoU localization losses combined with the
/// transport loss value `uot`.
pub fn detection_loss(
    assignment: &AssignmentResult,
    scores: &[f64],
    pred_boxes: &[BBox],
    gts: &[BBox],
    uot: f64,
    cfg: &DetectionLossConfig,
) -> Result<DetectionLoss> {
    let n = assignment.labels.len();
    if scores.len() != n || pred_boxes.len() != n {
        return Err(Error::Dimension {
            context: "detection_loss",
            expected: (n, n),
            got: (scores.len(), pred_boxes.len()),
        });
    }
    let (mut weight_sum, mut negatives) = (0.0, 0usize);
    let (mut cls_sum, mut loc_sum) = (0.0, 0.0);
    for j in 0..n {
        match assignment.labels[j] {
            Label::Positive => {
                let gt = assignment.matched_gt[j]
                    .and_then(|i| gts.get(i))
                    .ok_or_else(|| Error::Config(format!("positive anchor {j} has no valid object")))?;
                let w = assignment.weights[j].unwrap_or(1.0);
                weight_sum += w;
                cls_sum += w * cfg.focal.positive(scores[j]);
                loc_sum += w * (1.0 - giou(&pred_boxes[j], gt));
            }
            Label::Negative => {
                negatives += 1;
                cls_sum += cfg.focal.negative(scores[j]);
            }
            Label::Ignore => {}
        }
    }
    let mut norm = match cfg.normalizer {
        LossNormalizer::PositiveWeights => weight_sum,
        LossNormalizer::PositiveWeightsPlusNegatives => weight_sum + negatives as f64,
    };
    if norm <= 0.0 {
        norm = 1.0;
    }
    let cls = cls_sum / norm;
    let loc = loc_sum / norm;
    Ok(DetectionLoss {
        cls,
        loc,
        uot,
        total: cls + cfg.gamma1 * loc + cfg.gamma2 * uot,
        no_positives: weight_sum == 0.0,
    })
}

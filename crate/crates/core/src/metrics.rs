//! Detection metrics: AP at IoU 0.5, log-average miss rate over FPPI, Jaccard
//! index, and recall on the crowded and sparse object subsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::sim::crowd_flags;

pub const MATCH_IOU: f64 = 0.5;
const MISS_RATE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Detections and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub dets: Vec<Scored>,
    pub gts: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched object per detection, in input order.
    pub det_to_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl Matching {
    pub fn matches(&self) -> usize {
        self.gt_matched.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Greedy,
    /// Maximum-cardinality bipartite matching.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JiAggregation {
    #[default]
    PerImage,
    Dataset,
}

fn score_order(dets: &[Scored]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in score order: each detection takes the unmatched object
/// it overlaps most, if that overlap is at least `iou_thr`.
pub fn match_detections(dets: &[Scored], gts: &[BBox], iou_thr: f64) -> Matching {
    let mut det_to_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in score_order(dets) {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= iou_thr && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            gt_matched[g] = true;
            det_to_gt[d] = Some(g);
        }
    }
    Matching { det_to_gt, gt_matched }
}

/// Maximum number of one-to-one pairs with IoU at least `iou_thr`.
pub fn optimal_matching(dets: &[Scored], gts: &[BBox], iou_thr: f64) -> Matching {
    augmenting_matching(dets, gts, iou_thr).0
}

/// Augmenting-path matching over detections in score order. Also returns,
/// per step, whether that detection grew the matching; after each step the
/// matching is maximum for the detections seen so far.
fn augmenting_matching(dets: &[Scored], gts: &[BBox], iou_thr: f64) -> (Matching, Vec<bool>) {
    let adj: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| (0..gts.len()).filter(|&g| iou(&d.bbox, &gts[g]) >= iou_thr).collect())
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; gts.len()];

    fn augment(d: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &adj[d] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|o| augment(o, adj, owner, seen)) {
                owner[g] = Some(d);
                return true;
            }
        }
        false
    }

    let mut grew = Vec::with_capacity(dets.len());
    let mut seen = vec![false; gts.len()];
    for d in score_order(dets) {
        seen.iter_mut().for_each(|x| *x = false);
        grew.push(augment(d, &adj, &mut gt_owner, &mut seen));
    }
    let mut det_to_gt = vec![None; dets.len()];
    for (g, o) in gt_owner.iter().enumerate() {
        if let Some(d) = o {
            det_to_gt[*d] = Some(g);
        }
    }
    let matching = Matching {
        gt_matched: gt_owner.iter().map(|o| o.is_some()).collect(),
        det_to_gt,
    };
    (matching, grew)
}

fn run_matching(dets: &[Scored], gts: &[BBox], mode: MatchMode) -> Matching {
    match mode {
        MatchMode::Greedy => match_detections(dets, gts, MATCH_IOU),
        MatchMode::Optimal => optimal_matching(dets, gts, MATCH_IOU),
    }
}

/// All detections of all images as `(score, is_true_positive)`, best first.
fn pooled(images: &[ImageEval]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool, usize, usize)> = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let m = match_detections(&img.dets, &img.gts, MATCH_IOU);
        for (d, det) in img.dets.iter().enumerate() {
            all.push((det.score, m.det_to_gt[d].is_some(), k, d));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    all.into_iter().map(|(s, tp, _, _)| (s, tp)).collect()
}

fn total_gts(images: &[ImageEval]) -> usize {
    images.iter().map(|i| i.gts.len()).sum()
}

/// All-point interpolated average precision at IoU 0.5.
pub fn ap50(images: &[ImageEval]) -> Result<f64> {
    let num_gt = total_gts(images);
    if num_gt == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one object"));
    }
    let dets = pooled(images);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for &(_, is_tp) in &dets {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Miss rate against false positives per image, one point per distinct score
/// threshold, starting from the empty detection set.
pub fn miss_rate_curve(images: &[ImageEval]) -> Result<Vec<(f64, f64)>> {
    let num_gt = total_gts(images);
    if num_gt == 0 {
        return Err(Error::UndefinedMetric("miss rate needs at least one object"));
    }
    if images.is_empty() {
        return Err(Error::UndefinedMetric("miss rate needs at least one image"));
    }
    let n_img = images.len() as f64;
    let dets = pooled(images);
    let mut curve = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in dets.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = dets.get(k + 1).is_none_or(|next| next.0 != score);
        if group_end {
            curve.push((fp as f64 / n_img, 1.0 - tp as f64 / num_gt as f64));
        }
    }
    Ok(curve)
}

/// The nine FPPI reference points, log-spaced over `[1e-2, 1]`.
pub fn fppi_reference_points() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 0.25 * k as f64))
}

/// Log-average miss rate over the nine reference FPPI points.
///
/// Zero miss rates are floored before taking logs, except that a curve with
/// no misses at any reference point gives exactly 0.
pub fn log_average_miss_rate(images: &[ImageEval]) -> Result<f64> {
    let curve = miss_rate_curve(images)?;
    let refs = fppi_reference_points();
    let rates: Vec<f64> = refs
        .iter()
        .map(|&r| {
            curve
                .iter()
                .rev()
                .find(|(fppi, _)| *fppi <= r)
                .map(|p| p.1)
                .unwrap_or(1.0)
        })
        .collect();
    if rates.iter().all(|&mr| mr == 0.0) {
        return Ok(0.0);
    }
    let log_sum: f64 = rates.iter().map(|mr| mr.max(MISS_RATE_FLOOR).ln()).sum();
    Ok((log_sum / refs.len() as f64).exp())
}

/// `matches / (dets + gts - matches)`; 1 when both sets are empty.
pub fn jaccard_index(dets: &[Scored], gts: &[BBox], mode: MatchMode) -> f64 {
    if dets.is_empty() && gts.is_empty() {
        return 1.0;
    }
    let k = run_matching(dets, gts, mode).matches() as f64;
    k / (dets.len() as f64 + gts.len() as f64 - k)
}

/// Scores in matching order, each with whether it added a match.
///
/// Both matchers process detections in score order and never undo a match
/// count, so the kept set at any threshold is a prefix and its match count is
/// the number of flags set in that prefix.
fn match_steps(img: &ImageEval, mode: MatchMode) -> Vec<(f64, bool)> {
    let order = score_order(&img.dets);
    let grew = match mode {
        MatchMode::Greedy => {
            let m = match_detections(&img.dets, &img.gts, MATCH_IOU);
            order.iter().map(|&d| m.det_to_gt[d].is_some()).collect()
        }
        MatchMode::Optimal => augmenting_matching(&img.dets, &img.gts, MATCH_IOU).1,
    };
    order.iter().zip(grew).map(|(&d, g)| (img.dets[d].score, g)).collect()
}

fn ji_ratio(k: usize, d: usize, g: usize) -> f64 {
    if d + g == 0 {
        1.0
    } else {
        k as f64 / (d + g - k) as f64
    }
}

/// Best Jaccard index over all score thresholds, with the threshold used.
/// Detections with score at or above the threshold are kept; the infinite
/// threshold keeps none.
pub fn best_jaccard(images: &[ImageEval], aggregation: JiAggregation, mode: MatchMode) -> (f64, f64) {
    // (score, image, adds a match), best first
    let mut events: Vec<(f64, usize, bool)> = Vec::new();
    for (k, img) in images.iter().enumerate() {
        events.extend(match_steps(img, mode).into_iter().map(|(s, hit)| (s, k, hit)));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut kept = vec![0usize; images.len()];
    let mut matched = vec![0usize; images.len()];
    let gts: Vec<usize> = images.iter().map(|i| i.gts.len()).collect();
    let total_g: usize = gts.iter().sum();
    let (mut total_k, mut total_d) = (0usize, 0usize);
    let mut per_image: Vec<f64> = (0..images.len()).map(|k| ji_ratio(0, 0, gts[k])).collect();
    let value = |per_image: &[f64], total_k: usize, total_d: usize| match aggregation {
        JiAggregation::PerImage => per_image.iter().sum::<f64>() / images.len().max(1) as f64,
        JiAggregation::Dataset => ji_ratio(total_k, total_d, total_g),
    };

    let mut best = (value(&per_image, 0, 0), f64::INFINITY);
    let mut e = 0;
    while e < events.len() {
        let t = events[e].0;
        while e < events.len() && events[e].0 == t {
            let (_, k, hit) = events[e];
            kept[k] += 1;
            total_d += 1;
            if hit {
                matched[k] += 1;
                total_k += 1;
            }
            per_image[k] = ji_ratio(matched[k], kept[k], gts[k]);
            e += 1;
        }
        let v = value(&per_image, total_k, total_d);
        if v > best.0 {
            best = (v, t);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ji_aggregation: JiAggregation,
    pub ji_matching: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub mr: f64,
    pub ji: f64,
    /// Score threshold at which `ji` was reached.
    pub ji_threshold: f64,
    /// Recall on objects that overlap no other object above IoU 0.5.
    pub recall_sparse: Option<f64>,
    /// Recall on objects that do.
    pub recall_crowd: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
    pub num_dets: usize,
    pub num_images: usize,
}

pub fn evaluate(images: &[ImageEval], opts: &EvalOptions) -> Result<EvalReport> {
    let ap50 = ap50(images)?;
    let mr = log_average_miss_rate(images)?;
    let (ji, ji_threshold) = best_jaccard(images, opts.ji_aggregation, opts.ji_matching);
    let (mut hit_sparse, mut n_sparse, mut hit_crowd, mut n_crowd) = (0, 0, 0, 0);
    let (mut tp, mut dets) = (0, 0);
    for img in images {
        let m = match_detections(&img.dets, &img.gts, MATCH_IOU);
        tp += m.matches();
        dets += img.dets.len();
        for (crowded, hit) in crowd_flags(&img.gts).into_iter().zip(&m.gt_matched) {
            if crowded {
                n_crowd += 1;
                hit_crowd += *hit as usize;
            } else {
                n_sparse += 1;
                hit_sparse += *hit as usize;
            }
        }
    }
    let ratio = |hit: usize, n: usize| (n > 0).then(|| hit as f64 / n as f64);
    Ok(EvalReport {
        ap50,
        mr,
        ji,
        ji_threshold,
        recall_sparse: ratio(hit_sparse, n_sparse),
        recall_crowd: ratio(hit_crowd, n_crowd),
        true_positives: tp,
        false_positives: dets - tp,
        num_gt: total_gts(images),
        num_dets: dets,
        num_images: images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 30.0).unwrap()
    }

    fn s(x: f64, score: f64) -> Scored {
        Scored { bbox: bx(x), score }
    }

    #[test]
    fn greedy_matching_cases() {
        let gts = vec![bx(0.0), bx(100.0)];
        let m = match_detections(&[s(0.0, 0.9), s(100.0, 0.8)], &gts, 0.5);
        assert_eq!(m.det_to_gt, vec![Some(0), Some(1)]);

        let m = match_detections(&[s(1.0, 0.7), s(0.0, 0.9)], &gts, 0.5);
        assert_eq!(m.det_to_gt, vec![None, Some(0)]);
        assert_eq!(m.matches(), 1);
    }

    #[test]
    fn greedy_three_by_three_trace() {
        // g0 = [0,10], g1 = [3,13], g2 = [50,60]
        let gts = vec![bx(0.0), bx(3.0), bx(50.0)];
        // d0 (0.9) at x=2: iou g0 = 8/12, g1 = 9/11 -> takes g1
        // d1 (0.8) at x=1: iou g0 = 9/11, g1 = 8/12 (taken) -> takes g0
        // d2 (0.7) at x=56: iou g2 = 4/16 -> below 0.5, unmatched
        let dets = vec![s(2.0, 0.9), s(1.0, 0.8), s(56.0, 0.7)];
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.det_to_gt, vec![Some(1), Some(0), None]);
        assert_eq!(m.gt_matched, vec![true, true, false]);
    }

    #[test]
    fn optimal_matching_beats_greedy_when_greedy_blocks() {
        // d0 overlaps both objects and greedily takes g0, the only object d1 can match
        let gts = vec![bx(0.0), bx(2.5)];
        let dets = vec![s(1.0, 0.9), s(-1.5, 0.8)];
        assert_eq!(match_detections(&dets, &gts, 0.5).matches(), 1);
        assert_eq!(optimal_matching(&dets, &gts, 0.5).matches(), 2);
    }

    #[test]
    fn ap_cases() {
        let gts = vec![bx(0.0), bx(100.0), bx(200.0)];
        let perfect = ImageEval {
            dets: gts.iter().map(|g| Scored { bbox: *g, score: 0.9 }).collect(),
            gts: gts.clone(),
        };
        assert_eq!(ap50(&[perfect]).unwrap(), 1.0);
        let wrong = ImageEval {
            dets: vec![s(400.0, 0.9), s(300.0, 0.5)],
            gts: gts.clone(),
        };
        assert_eq!(ap50(&[wrong]).unwrap(), 0.0);
        // TP, TP, FP, TP over 3 objects: envelope (1, 1, 3/4, 3/4)
        let mixed = ImageEval {
            dets: vec![s(0.0, 0.9), s(100.0, 0.8), s(300.0, 0.7), s(200.0, 0.6)],
            gts: gts.clone(),
        };
        let expected = (1.0 + 1.0 + 0.75) / 3.0;
        assert!((ap50(&[mixed]).unwrap() - expected).abs() < 1e-12);
        assert!(ap50(&[ImageEval::default()]).is_err());
    }

    #[test]
    fn miss_rate_cases() {
        let gts = vec![bx(0.0), bx(100.0)];
        let perfect = ImageEval {
            dets: vec![s(0.0, 0.9), s(100.0, 0.8)],
            gts: gts.clone(),
        };
        assert_eq!(log_average_miss_rate(&[perfect]).unwrap(), 0.0);
        let none = ImageEval {
            dets: vec![],
            gts: gts.clone(),
        };
        assert_eq!(log_average_miss_rate(&[none]).unwrap(), 1.0);

        // one image with detections TP (0.9), FP (0.8), TP (0.7), three empty images:
        // points (0, 1), (0, 0.5), (0.25, 0.5), (0.25, 0)
        let mut images = vec![ImageEval {
            dets: vec![s(0.0, 0.9), s(300.0, 0.8), s(100.0, 0.7)],
            gts,
        }];
        images.extend(std::iter::repeat_n(ImageEval::default(), 3));
        let curve = miss_rate_curve(&images).unwrap();
        assert_eq!(curve, vec![(0.0, 1.0), (0.0, 0.5), (0.25, 0.5), (0.25, 0.0)]);
        // refs 0.01 .. 0.178 see 0.5 (6 points), 0.316 .. 1 see 0
        let expected = ((6.0 * 0.5f64.ln() + 3.0 * 1e-10f64.ln()) / 9.0).exp();
        assert!((log_average_miss_rate(&images).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn miss_rate_groups_tied_scores() {
        let gts = vec![bx(0.0)];
        let img = ImageEval {
            dets: vec![s(300.0, 0.9), s(0.0, 0.9)],
            gts,
        };
        assert_eq!(miss_rate_curve(&[img]).unwrap(), vec![(0.0, 1.0), (1.0, 0.0)]);
    }

    #[test]
    fn reference_points() {
        let r = fppi_reference_points();
        assert!((r[0] - 0.01).abs() < 1e-15);
        assert!((r[4] - 0.1).abs() < 1e-15);
        assert!((r[8] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jaccard_cases() {
        let gts: Vec<BBox> = (0..10).map(|k| bx(100.0 * k as f64)).collect();
        let perfect: Vec<Scored> = gts.iter().map(|g| Scored { bbox: *g, score: 0.5 }).collect();
        assert_eq!(jaccard_index(&perfect, &gts, MatchMode::Greedy), 1.0);
        assert_eq!(jaccard_index(&[], &gts, MatchMode::Greedy), 0.0);
        assert_eq!(jaccard_index(&[], &[], MatchMode::Greedy), 1.0);
        // 7 hits and 1 miss among 8 detections over 10 objects
        let mut dets: Vec<Scored> = perfect[..7].to_vec();
        dets.push(s(5000.0, 0.4));
        let v = jaccard_index(&dets, &gts, MatchMode::Greedy);
        assert!((v - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn best_jaccard_picks_the_threshold() {
        let gts = vec![bx(0.0), bx(100.0)];
        let img = ImageEval {
            dets: vec![s(0.0, 0.9), s(100.0, 0.6), s(300.0, 0.3)],
            gts,
        };
        let (ji, t) = best_jaccard(std::slice::from_ref(&img), JiAggregation::PerImage, MatchMode::Greedy);
        assert_eq!((ji, t), (1.0, 0.6));
        let (ji, _) = best_jaccard(&[img], JiAggregation::Dataset, MatchMode::Greedy);
        assert_eq!(ji, 1.0);
    }

    #[test]
    fn report_splits_recall() {
        let crowd_a = bx(0.0);
        let crowd_b = BBox::new(2.0, 0.0, 12.0, 30.0).unwrap();
        let lone = bx(200.0);
        let img = ImageEval {
            dets: vec![Scored { bbox: crowd_a, score: 0.9 }, Scored { bbox: lone, score: 0.8 }],
            gts: vec![crowd_a, crowd_b, lone],
        };
        let r = evaluate(&[img], &EvalOptions::default()).unwrap();
        assert_eq!(r.recall_crowd, Some(0.5));
        assert_eq!(r.recall_sparse, Some(1.0));
        assert_eq!((r.true_positives, r.false_positives, r.num_gt), (2, 0, 3));
    }
}

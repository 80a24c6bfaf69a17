//! End-to-end experiment: simulate a scene, build costs, solve the transport
//! problem, decode the assignment, suppress duplicates and evaluate.
//!
//! Scenes are independent and run in parallel; results are collected in seed
//! order so every output is a deterministic function of the config.

use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::assign::{
    compute_weights, decode, detection_loss, uot_loss, AssignStrategy, AssignmentResult, DetectionLoss, Label,
    UotLoss,
};
use crate::config::{DensityLookup, ExperimentConfig, PriorMode};
use crate::cost::{
    center_prior_candidates, combine_costs, iou_threshold_candidates, level_cost, overlap_aware_cost_from_ious,
    preferred_levels, CandidateMask,
};
use crate::error::{Error, Result, StageExt};
use crate::geometry::pairwise_iou;
use crate::io::{write_json, write_jsonl, AssignmentRecord, DensityFile, DetectionRecord, SCHEMA_VERSION};
use crate::metrics::{evaluate, EvalReport, ImageEval, Scored};
use crate::nms::{dg_nms, vanilla_nms, Detection, ScaleVariant};
use crate::sim::{density_from_plan, density_prior, generate_scene, prediction_ious, simulate_predictions};
use crate::sim::{DensityMap, Prediction, Scene};
use crate::uot::{solve_uot, TransportPlan, TransportProblem};

/// A scene, its anchor grid and one prediction per anchor.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub grid: AnchorGrid,
    pub predictions: Vec<Prediction>,
}

pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let scene = generate_scene(&cfg.scene, seed).stage("simulate")?;
    let grid = cfg
        .anchors
        .grid(scene.image_width, scene.image_height)
        .stage("anchors")?;
    let predictions = simulate_predictions(&scene, &grid, &cfg.noise, seed);
    Ok(Prepared {
        scene,
        grid,
        predictions,
    })
}

/// Pair an existing scene and predictions with the configured anchor grid.
pub fn prepare(cfg: &ExperimentConfig, scene: Scene, predictions: Vec<Prediction>) -> Result<Prepared> {
    let grid = cfg
        .anchors
        .grid(scene.image_width, scene.image_height)
        .stage("anchors")?;
    if predictions.len() != grid.len() {
        return Err(Error::Dimension {
            context: "predictions per anchor",
            expected: (grid.len(), 1),
            got: (predictions.len(), 1),
        }
        .at("anchors"));
    }
    Ok(Prepared {
        scene,
        grid,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct AssignOutput {
    pub candidates: CandidateMask,
    /// Anchor masses of the transport problem.
    pub prior: Vec<f64>,
    pub plan: TransportPlan,
    pub assignment: AssignmentResult,
    pub uot_loss: UotLoss,
    pub detection_loss: DetectionLoss,
    /// Reconstructed density: the plan's column sums.
    pub density: DensityMap,
}

pub fn candidates(cfg: &ExperimentConfig, p: &Prepared) -> Result<CandidateMask> {
    match cfg.cost.prior {
        PriorMode::Center { radius } => center_prior_candidates(&p.scene.gts, &p.grid, radius),
        PriorMode::Iou { threshold } => {
            let boxes = p.grid.anchor_boxes(cfg.anchors.scale, cfg.anchors.aspect);
            iou_threshold_candidates(&p.scene.gts, &boxes, threshold)
        }
    }
}

pub fn assign_scene(cfg: &ExperimentConfig, p: &Prepared) -> Result<AssignOutput> {
    let gts = &p.scene.gts;
    let phi = prediction_ious(&p.scene, &p.predictions).stage("cost")?;
    let cost = (|| {
        let psi = pairwise_iou(gts, gts)?;
        let c_iou = overlap_aware_cost_from_ious(phi.view(), psi.view())?;
        if !cfg.cost.level_cost {
            return Ok(&c_iou * cfg.cost.gamma);
        }
        let preferred: Vec<Vec<i32>> = gts
            .iter()
            .map(|g| preferred_levels(g, &cfg.cost.soi, cfg.cost.band))
            .collect();
        let c_level = level_cost(&preferred, &p.grid.anchor_levels())?;
        combine_costs(c_iou.view(), c_level.view(), cfg.cost.gamma)
    })()
    .stage("cost")?;

    let candidates = candidates(cfg, p).stage("candidates")?;
    let prior = density_prior(phi.view(), candidates.mask.view()).stage("prior")?;

    let masked = candidates.apply(cost.view()).stage("transport")?;
    let problem = TransportProblem::new(masked, Array1::from(prior.clone()), cfg.uot.epsilon)
        .and_then(|p| p.with_marginal_weight(cfg.uot.rho))
        .map(|p| p.with_regularizer(cfg.uot.regularizer))
        .stage("transport")?;
    let plan = solve_uot(&problem, &cfg.uot.solve_options()).stage("transport")?;

    let ious = matches!(cfg.assign.strategy, AssignStrategy::DynK { .. }).then(|| phi.view());
    let assignment = decode(plan.pi.view(), &cfg.assign.strategy, ious)
        .and_then(|a| compute_weights(&plan, &a))
        .stage("assign")?;

    let uot = uot_loss(&plan, &problem, &cfg.assign.uot_loss).stage("loss")?;
    let scores: Vec<f64> = p.predictions.iter().map(|x| x.score).collect();
    let boxes: Vec<_> = p.predictions.iter().map(|x| x.bbox).collect();
    let det_loss = detection_loss(&assignment, &scores, &boxes, gts, uot.total, &cfg.assign.detection_loss)
        .stage("loss")?;
    let density = density_from_plan(&plan, &p.grid).stage("density")?;

    Ok(AssignOutput {
        candidates,
        prior,
        plan,
        assignment,
        uot_loss: uot,
        detection_loss: det_loss,
        density,
    })
}

/// Predictions above the score floor, each carrying a density from `density`.
pub fn detections(cfg: &ExperimentConfig, p: &Prepared, density: &DensityMap) -> Vec<Detection> {
    p.predictions
        .iter()
        .enumerate()
        .filter(|(_, x)| x.score >= cfg.nms.score_floor)
        .map(|(j, x)| {
            let d = match cfg.nms.density_lookup {
                DensityLookup::Anchor => density.values[j],
                DensityLookup::Bilinear => {
                    let (cx, cy) = x.bbox.center();
                    density.bilinear(&p.grid, p.grid.anchors[j].level, cx, cy)
                }
            };
            Detection {
                bbox: x.bbox,
                score: x.score,
                density: d,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Suppressed {
    pub dg: Vec<Detection>,
    /// One kept set per configured fixed threshold.
    pub vanilla: Vec<Vec<Detection>>,
}

pub fn suppress(cfg: &ExperimentConfig, dets: &[Detection]) -> Result<Suppressed> {
    let dg = dg_nms(dets, cfg.nms.sigma, cfg.nms.variant).stage("nms")?;
    let vanilla = cfg
        .nms
        .vanilla_thresholds
        .iter()
        .map(|&t| vanilla_nms(dets, t))
        .collect::<Result<_>>()
        .stage("nms")?;
    Ok(Suppressed { dg, vanilla })
}

#[derive(Debug, Clone)]
pub struct SceneRun {
    pub seed: u64,
    pub prepared: Prepared,
    pub assign: AssignOutput,
    pub detections: Vec<Detection>,
    pub kept: Suppressed,
}

pub fn run_scene(cfg: &ExperimentConfig, seed: u64) -> Result<SceneRun> {
    let prepared = simulate(cfg, seed)?;
    let assign = assign_scene(cfg, &prepared)?;
    let detections = detections(cfg, &prepared, &assign.density);
    let kept = suppress(cfg, &detections)?;
    Ok(SceneRun {
        seed,
        prepared,
        assign,
        detections,
        kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    /// `dg_nms` or `vanilla@<threshold>`.
    pub method: String,
    pub mean_kept: f64,
    pub metrics: EvalReport,
}

/// Averages over scenes (objects for the per-object fields).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub mean_candidates_per_object: f64,
    pub mean_positives_per_object: f64,
    pub mean_ignored: f64,
    pub objects_without_positives: usize,
    pub degenerate_objects: usize,
    pub mean_transported_mass_per_object: f64,
    pub converged_solves: usize,
    pub mean_iterations: f64,
    pub mean_uot_loss: f64,
    pub mean_detection_loss: f64,
    pub mean_detections: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub mean_crowd_pairs: f64,
    pub assignment: AssignmentSummary,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub fn vanilla_name(threshold: f64) -> String {
    format!("vanilla@{threshold}")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn images(runs: &[SceneRun], pick: impl Fn(&SceneRun) -> &[Detection]) -> Vec<ImageEval> {
    runs.iter()
        .map(|r| ImageEval {
            dets: pick(r)
                .iter()
                .map(|d| Scored {
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect(),
            gts: r.prepared.scene.gts.clone(),
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[SceneRun]) -> Result<RunReport> {
    let objects: usize = runs.iter().map(|r| r.prepared.scene.gts.len()).sum();
    let per_object = |total: f64| if objects == 0 { 0.0 } else { total / objects as f64 };
    let assignment = AssignmentSummary {
        mean_candidates_per_object: per_object(
            runs.iter()
                .map(|r| r.assign.candidates.count_per_object().iter().sum::<usize>() as f64)
                .sum(),
        ),
        mean_positives_per_object: per_object(
            runs.iter().map(|r| r.assign.assignment.count(Label::Positive) as f64).sum(),
        ),
        mean_ignored: mean(runs.iter().map(|r| r.assign.assignment.count(Label::Ignore) as f64)),
        objects_without_positives: runs
            .iter()
            .map(|r| r.assign.assignment.diagnostics.objects_without_positives.len())
            .sum(),
        degenerate_objects: runs.iter().map(|r| r.assign.candidates.degenerate_objects().len()).sum(),
        mean_transported_mass_per_object: per_object(runs.iter().map(|r| r.assign.plan.pi.sum()).sum()),
        converged_solves: runs.iter().filter(|r| r.assign.plan.converged).count(),
        mean_iterations: mean(runs.iter().map(|r| r.assign.plan.iterations as f64)),
        mean_uot_loss: mean(runs.iter().map(|r| r.assign.uot_loss.total)),
        mean_detection_loss: mean(runs.iter().map(|r| r.assign.detection_loss.total)),
        mean_detections: mean(runs.iter().map(|r| r.detections.len() as f64)),
    };

    let mut methods = Vec::new();
    let dg = images(runs, |r| &r.kept.dg);
    methods.push(MethodReport {
        method: "dg_nms".into(),
        mean_kept: mean(runs.iter().map(|r| r.kept.dg.len() as f64)),
        metrics: evaluate(&dg, &cfg.eval).stage("evaluate")?,
    });
    for (k, &t) in cfg.nms.vanilla_thresholds.iter().enumerate() {
        let imgs = images(runs, |r| &r.kept.vanilla[k]);
        methods.push(MethodReport {
            method: vanilla_name(t),
            mean_kept: mean(runs.iter().map(|r| r.kept.vanilla[k].len() as f64)),
            metrics: evaluate(&imgs, &cfg.eval).stage("evaluate")?,
        });
    }
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_crowd_pairs: mean(runs.iter().map(|r| r.prepared.scene.crowd_pairs as f64)),
        assignment,
        methods,
    })
}

pub struct PipelineOutput {
    pub report: RunReport,
    pub runs: Vec<SceneRun>,
}

/// Run every seed of `cfg` and evaluate the pooled results.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate().stage("config")?;
    let runs: Vec<SceneRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_scene(cfg, seed))
        .collect::<Result<_>>()?;
    let report = summarize(cfg, &runs)?;
    Ok(PipelineOutput { report, runs })
}

const CSV_HEADER: [&str; 12] = [
    "method",
    "ap50",
    "mr",
    "ji",
    "ji_threshold",
    "recall_sparse",
    "recall_crowd",
    "true_positives",
    "false_positives",
    "num_gt",
    "num_dets",
    "mean_kept",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_fields(m: &MethodReport) -> Vec<String> {
    let r = &m.metrics;
    vec![
        m.method.clone(),
        r.ap50.to_string(),
        r.mr.to_string(),
        r.ji.to_string(),
        r.ji_threshold.to_string(),
        opt(r.recall_sparse),
        opt(r.recall_crowd),
        r.true_positives.to_string(),
        r.false_positives.to_string(),
        r.num_gt.to_string(),
        r.num_dets.to_string(),
        m.mean_kept.to_string(),
    ]
}

/// One CSV row per suppression method.
pub fn report_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for m in &report.methods {
        w.write_record(metric_fields(m))?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Positive and ignored anchors; negatives are implied by absence.
pub fn assignment_records(seed: u64, grid: &AnchorGrid, a: &AssignmentResult) -> Vec<AssignmentRecord> {
    a.labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != Label::Negative)
        .map(|(j, label)| {
            let anchor = &grid.anchors[j];
            AssignmentRecord {
                seed,
                anchor: j,
                level: anchor.level,
                row: anchor.row,
                col: anchor.col,
                label: *label,
                matched_gt: a.matched_gt[j],
                weight: a.weights[j],
            }
        })
        .collect()
}

pub fn density_file(seed: u64, grid: &AnchorGrid, density: &DensityMap) -> DensityFile {
    DensityFile {
        schema_version: SCHEMA_VERSION,
        seed,
        image_width: grid.width,
        image_height: grid.height,
        levels: grid.levels.clone(),
        values: density.values.clone(),
    }
}

/// Write the run directory: config snapshot, report, assignments, densities
/// and kept detections.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &PipelineOutput) -> Result<()> {
    (|| {
        std::fs::create_dir_all(dir)?;
        let mut snapshot = cfg.clone();
        snapshot.output_dir = None;
        std::fs::write(dir.join("config.toml"), snapshot.to_toml_string()?)?;
        write_json(&dir.join("report.json"), &out.report)?;
        std::fs::write(dir.join("report.csv"), report_csv(&out.report)?)?;

        let mut assignments = Vec::new();
        let mut densities = Vec::new();
        let mut dg = Vec::new();
        let mut vanilla: Vec<Vec<DetectionRecord>> = vec![Vec::new(); cfg.nms.vanilla_thresholds.len()];
        for r in &out.runs {
            assignments.extend(assignment_records(r.seed, &r.prepared.grid, &r.assign.assignment));
            densities.push(density_file(r.seed, &r.prepared.grid, &r.assign.density));
            dg.extend(r.kept.dg.iter().map(|d| DetectionRecord::new(r.seed, d)));
            for (k, kept) in r.kept.vanilla.iter().enumerate() {
                vanilla[k].extend(kept.iter().map(|d| DetectionRecord::new(r.seed, d)));
            }
        }
        write_jsonl(&dir.join("assignments.jsonl"), &assignments)?;
        write_jsonl(&dir.join("density.jsonl"), &densities)?;
        write_jsonl(&dir.join("kept_dg_nms.jsonl"), &dg)?;
        for (k, t) in cfg.nms.vanilla_thresholds.iter().enumerate() {
            write_jsonl(&dir.join(format!("kept_vanilla_{t}.jsonl")), &vanilla[k])?;
        }
        Ok(())
    })()
    .stage("write")
}

/// Named sweep axes. Any dotted config path (e.g. `uot.rho`) is accepted too.
pub const SWEEP_AXES: [&str; 8] = ["th", "th_pos", "th_neg", "variant", "radius", "sigma", "epsilon", "strategy"];

/// Config with one axis set to `value`.
///
/// `th` takes `pos/neg`, `strategy` takes `dyn_k_star`, `dyn_k:<top>` or
/// `fix_k:<k>`, the rest take a single value.
pub fn apply_axis(cfg: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig> {
    let mut next = cfg.clone();
    let current = match cfg.assign.strategy {
        AssignStrategy::DynKStar { th_pos, th_neg } => (th_pos, th_neg),
        _ => (0.7, 0.8),
    };
    let number = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("'{v}' is not a number for axis '{axis}'")))
    };
    let count = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("'{v}' is not a count for axis '{axis}'")))
    };
    match axis {
        "th" | "th_pos/th_neg" => {
            let (p, n) = value
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("axis 'th' takes pos/neg, got '{value}'")))?;
            next.assign.strategy = AssignStrategy::DynKStar {
                th_pos: number(p)?,
                th_neg: number(n)?,
            };
        }
        "th_pos" => next.assign.strategy = AssignStrategy::DynKStar { th_pos: number(value)?, th_neg: current.1 },
        "th_neg" => next.assign.strategy = AssignStrategy::DynKStar { th_pos: current.0, th_neg: number(value)? },
        "variant" | "f-variant" => next.nms.variant = value.trim().parse::<ScaleVariant>()?,
        "radius" | "r" => next.cost.prior = PriorMode::Center { radius: count(value)? },
        "sigma" => next.nms.sigma = number(value)?,
        "epsilon" => next.uot.epsilon = number(value)?,
        "strategy" => {
            next.assign.strategy = match value.trim().split_once(':') {
                None if value.trim() == "dyn_k_star" => AssignStrategy::DynKStar {
                    th_pos: current.0,
                    th_neg: current.1,
                },
                Some(("dyn_k", k)) => AssignStrategy::DynK { top: count(k)? },
                Some(("fix_k", k)) => AssignStrategy::FixK { k: count(k)? },
                _ => return Err(Error::Config(format!("unknown assignment strategy '{value}'"))),
            }
        }
        dotted if dotted.contains('.') || dotted == "seeds" => next.set(dotted, value)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep axis '{axis}' (known: {}, or a dotted config path)",
                SWEEP_AXES.join(", ")
            )))
        }
    }
    next.validate()?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub mean_candidates_per_object: f64,
    pub mean_positives_per_object: f64,
    pub method: MethodReport,
}

/// One pipeline run per value; each run covers all seeds of `cfg`.
pub fn run_sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()).at("sweep"));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| apply_axis(cfg, axis, v))
        .collect::<Result<_>>()
        .stage("sweep")?;
    let reports: Vec<RunReport> = configs
        .par_iter()
        .map(|c| run_pipeline(c).map(|o| o.report))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (v, r) in values.iter().zip(reports) {
        for m in r.methods {
            rows.push(SweepRow {
                value: v.clone(),
                mean_candidates_per_object: r.assignment.mean_candidates_per_object,
                mean_positives_per_object: r.assignment.mean_positives_per_object,
                method: m,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![axis, "mean_candidates_per_object", "mean_positives_per_object"];
    header.extend(CSV_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.value.clone(),
            r.mean_candidates_per_object.to_string(),
            r.mean_positives_per_object.to_string(),
        ];
        rec.extend(metric_fields(&r.method));
        w.write_record(&rec)?;
    }
    csv_string(w)
}

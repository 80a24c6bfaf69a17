//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dga_core::assign::{compute_weights, decode, decode_assignment, row_labels, AssignStrategy, Label};
use dga_core::config::ExperimentConfig;
use dga_core::cost::{overlap_aware_cost, overlap_aware_cost_from_ious};
use dga_core::geometry::{iou, BBox};
use dga_core::metrics::{
    ap50, jaccard_index, log_average_miss_rate, match_detections, optimal_matching, evaluate, ImageEval, MatchMode,
    Scored, MATCH_IOU,
};
use dga_core::nms::{decay_factor, dg_nms, vanilla_nms, Detection, ScaleVariant};
use dga_core::pipeline::{assign_scene, run_pipeline, run_scene, run_sweep, simulate, SceneRun};
use dga_core::sim::OverlapLevel;
use dga_core::uot::{brute_force_uot, solve_uot, Regularizer, SolveOptions, TransportPlan, TransportProblem};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_problem(rng: &mut ChaCha8Rng) -> TransportProblem {
    let (m, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let cost = Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..3.0));
    let b = Array1::from_shape_fn(n, |_| rng.random_range(0.05..2.0));
    let eps = rng.random_range(0.05..1.0);
    let reg = if rng.random_bool(0.5) {
        Regularizer::RelativeEntropy
    } else {
        Regularizer::Entropy
    };
    TransportProblem::new(cost, b, eps)
        .unwrap()
        .with_marginal_weight(rng.random_range(0.3..3.0))
        .unwrap()
        .with_regularizer(reg)
}

fn uot_oracle_equivalence(o: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let p = random_problem(&mut rng);
        let plan = solve_uot(&p, &SolveOptions::default()).unwrap();
        let oracle = brute_force_uot(&p).unwrap();
        let gap = (plan.objective - oracle.objective).abs() / (1.0 + oracle.objective.abs());
        worst = worst.max(gap);
        o.check(gap <= 1e-3, format!("problem {k}: solver {} oracle {}", plan.objective, oracle.objective));
    }
    let t = start.elapsed();
    o.check(t < Duration::from_secs(10), format!("took {}", secs(t)));
    o.note(format!("worst relative gap {worst:.2e}, {}", secs(t)));
}

/// Direct evaluation of the overlap-aware cost for one entry.
fn cost_entry(phi: &Array2<f64>, psi: &Array2<f64>, i: usize, j: usize) -> f64 {
    let clamp = 1e-7;
    let mut inner = -phi[[i, j]].max(clamp).ln();
    for k in 0..phi.nrows() {
        if k != i {
            inner += (1.0 - psi[[i, k]]) * -(1.0 - phi[[k, j]]).max(clamp).ln();
        }
    }
    (1.0 - phi[[i, j]]) * inner
}

fn random_ious(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let phi = Array2::from_shape_fn((m, n), |_| rng.random_range(0.001..0.999));
    let mut psi = Array2::from_shape_fn((m, m), |_| rng.random_range(0.0..0.95));
    for i in 0..m {
        psi[[i, i]] = 1.0;
        for k in 0..i {
            psi[[i, k]] = psi[[k, i]];
        }
    }
    (phi, psi)
}

fn cost_exactness(o: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // perfect fit, with other objects present
    for _ in 0..100 {
        let (mut phi, psi) = random_ious(&mut rng);
        let (i, j) = (rng.random_range(0..phi.nrows()), rng.random_range(0..phi.ncols()));
        phi[[i, j]] = 1.0;
        let c = overlap_aware_cost_from_ious(phi.view(), psi.view()).unwrap();
        o.check(c[[i, j]] == 0.0, format!("cost {} at a perfect fit", c[[i, j]]));
    }
    // single object closed form
    let mut worst: f64 = 0.0;
    for k in 1..1000 {
        let phi = k as f64 / 1000.0;
        let c = overlap_aware_cost_from_ious(array![[phi]].view(), array![[1.0]].view()).unwrap()[[0, 0]];
        worst = worst.max((c - (1.0 - phi) * -phi.ln()).abs());
    }
    o.check(worst <= 1e-9, format!("closed form error {worst:e}"));
    // monotonicity and agreement with the direct formula
    let mut violations = 0;
    for _ in 0..1000 {
        let (phi, psi) = random_ious(&mut rng);
        let (m, n) = phi.dim();
        let c = overlap_aware_cost_from_ious(phi.view(), psi.view()).unwrap();
        for i in 0..m {
            for j in 0..n {
                if (c[[i, j]] - cost_entry(&phi, &psi, i, j)).abs() > 1e-9 * (1.0 + c[[i, j]]) {
                    violations += 1;
                }
            }
        }
        let (i, j) = (rng.random_range(0..m), rng.random_range(0..n));
        let mut own = phi.clone();
        own[[i, j]] = (own[[i, j]] + rng.random_range(0.001..0.5)).min(0.999);
        if cost_entry(&own, &psi, i, j) > c[[i, j]] + 1e-12 {
            violations += 1;
        }
        let k = rng.random_range(0..m);
        if k != i {
            let mut foreign = phi.clone();
            foreign[[k, j]] = (foreign[[k, j]] + rng.random_range(0.001..0.5)).min(0.999);
            let after = overlap_aware_cost_from_ious(foreign.view(), psi.view()).unwrap()[[i, j]];
            if after < c[[i, j]] - 1e-12 {
                violations += 1;
            }
        }
    }
    o.check(violations == 0, format!("{violations} monotonicity or formula violations"));
    o.note(format!("closed form max error {worst:.1e}"));
}

fn overlap_preference(o: &mut Outcome) {
    let b = |x1: f64, x2: f64| BBox::new(x1, 0.0, x2, 30.0).unwrap();
    let gts = [b(10.0, 20.0), b(22.0, 32.0)];
    // both predictions cover GT1 equally; prediction 2 also touches GT2
    let preds = [b(7.0, 17.0), b(13.0, 23.0)];
    let phi1 = iou(&gts[0], &preds[0]);
    o.check((phi1 - iou(&gts[0], &preds[1])).abs() < 1e-12, "unequal IoU with GT1");
    o.check(iou(&gts[1], &preds[1]) > iou(&gts[1], &preds[0]), "prediction 2 should overlap GT2 more");
    let c = overlap_aware_cost(&gts, &preds).unwrap();
    o.check(c[[0, 0]] < c[[0, 1]], format!("C11 {} !< C12 {}", c[[0, 0]], c[[0, 1]]));
    let p = TransportProblem::new(c.clone(), Array1::ones(2), 0.7).unwrap();
    let plan = solve_uot(&p, &SolveOptions::default()).unwrap();
    o.check(
        plan.pi[[0, 0]] > plan.pi[[0, 1]],
        format!("GT1 sends {} to prediction 1, {} to 2", plan.pi[[0, 0]], plan.pi[[0, 1]]),
    );
    o.note(format!(
        "C11 {:.3} C12 {:.3}, pi11 {:.3} pi12 {:.3}",
        c[[0, 0]],
        c[[0, 1]],
        plan.pi[[0, 0]],
        plan.pi[[0, 1]]
    ));
}

fn plan(pi: Array2<f64>) -> TransportPlan {
    TransportPlan {
        pi,
        objective: 0.0,
        iterations: 0,
        converged: true,
    }
}

fn assignment_decode(o: &mut Outcome) {
    use Label::*;
    let a = decode_assignment(&plan(array![[0.5, 0.3, 0.1, 0.05, 0.05]]), 0.7, 0.8).unwrap();
    o.check(
        a.labels == vec![Positive, Ignore, Negative, Negative, Negative],
        format!("worked example gave {:?}", a.labels),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..1000 {
        let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=12));
        let pi = Array2::from_shape_fn((m, n), |_| {
            if rng.random_bool(0.25) {
                0.0
            } else {
                rng.random_range(0.001..1.0)
            }
        });
        let th_pos = rng.random_range(0.01..=1.0);
        let th_neg = th_pos + rng.random_range(0.0..=1.0) * (1.0 - th_pos);
        let p = plan(pi.clone());
        let a = compute_weights(&p, &decode_assignment(&p, th_pos, th_neg).unwrap()).unwrap();
        let isolated: Vec<Vec<Label>> = (0..m).map(|i| row_labels(pi.row(i), th_pos, th_neg)).collect();
        for j in 0..n {
            let ok = match (a.labels[j], a.matched_gt[j], a.weights[j]) {
                (Positive, Some(i), Some(w)) => {
                    let holds_max = (0..m).all(|k| isolated[k][j] != Positive || pi[[i, j]] >= pi[[k, j]]);
                    isolated[i][j] == Positive && holds_max && w > 0.0 && w <= 1.0
                }
                (Ignore, None, None) => (0..m).any(|k| isolated[k][j] == Ignore),
                (Negative, None, None) => (0..m).all(|k| isolated[k][j] == Negative),
                _ => false,
            };
            if !ok {
                bad += 1;
            }
        }
        for i in 0..m {
            let max = a
                .positives_of(i)
                .map(|j| a.weights[j].unwrap())
                .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |x| x.max(w))));
            if max.is_some_and(|w| w != 1.0) {
                bad += 1;
            }
        }
    }
    o.check(bad == 0, format!("{bad} partition or weight violations"));

    let a = decode(array![[0.1, 0.4, 0.0], [0.0, 0.3, 0.2]].view(), &AssignStrategy::default(), None).unwrap();
    o.check(a.matched_gt[1] == Some(0), "larger mass should win a shared anchor");
    let a = decode(array![[0.0, 0.3, 0.1], [0.1, 0.3, 0.0]].view(), &AssignStrategy::default(), None).unwrap();
    o.check(a.matched_gt[1] == Some(0), "earlier object should win a tie");
    let p = plan(array![[0.5, 0.5, 0.0], [0.0, 0.6, 0.6]]);
    let a = decode_assignment(&p, 1.0, 1.0).unwrap();
    o.check(
        a.matched_gt == vec![Some(0), Some(1), Some(1)],
        format!("collision gave {:?}", a.matched_gt),
    );
}

fn crowded_config(seeds: std::ops::Range<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.count = 20;
    cfg.scene.overlap = OverlapLevel::Crowded;
    cfg.seeds = seeds.collect();
    cfg
}

fn kept_count(dets: &[Detection], v: ScaleVariant) -> usize {
    dg_nms(dets, 0.5, v).unwrap().len()
}

fn dg_nms_equivalences(o: &mut Outcome, scenes: &[SceneRun]) {
    let mut mismatched = 0;
    let mut inverted = Vec::new();
    for r in scenes {
        let mut uniform = r.detections.clone();
        for d in uniform.iter_mut() {
            d.density = 0.7;
        }
        let vanilla = vanilla_nms(&uniform, 0.5).unwrap();
        for v in [ScaleVariant::Square, ScaleVariant::Linear, ScaleVariant::Sqrt] {
            if dg_nms(&uniform, 0.5, v).unwrap() != vanilla {
                mismatched += 1;
            }
        }
        let (sq, lin, rt) = (
            kept_count(&r.detections, ScaleVariant::Square),
            kept_count(&r.detections, ScaleVariant::Linear),
            kept_count(&r.detections, ScaleVariant::Sqrt),
        );
        if !(rt >= lin && lin >= sq) {
            inverted.push(format!("seed {} kept sqrt {rt} / s {lin} / s2 {sq}", r.seed));
        }
    }
    o.check(mismatched == 0, format!("{mismatched} uniform-density runs differ from vanilla@0.5"));
    o.check(
        inverted.is_empty(),
        format!(
            "variant ordering sqrt >= s >= s2 fails on {}/{} scenes (first: {})",
            inverted.len(),
            scenes.len(),
            inverted.first().map(String::as_str).unwrap_or("-")
        ),
    );
    let d = decay_factor(0.5, 0.5);
    o.check((d - (-0.5f64).exp()).abs() <= 1e-12, format!("decay {d}"));
    let mean = |v| scenes.iter().map(|r| kept_count(&r.detections, v) as f64).sum::<f64>() / scenes.len() as f64;
    o.note(format!(
        "mean kept sqrt {:.1} / s {:.1} / s2 {:.1}",
        mean(ScaleVariant::Sqrt),
        mean(ScaleVariant::Linear),
        mean(ScaleVariant::Square)
    ));
}

fn single(r: &SceneRun, dets: &[Detection]) -> ImageEval {
    ImageEval {
        dets: dets
            .iter()
            .map(|d| Scored {
                bbox: d.bbox,
                score: d.score,
            })
            .collect(),
        gts: r.prepared.scene.gts.clone(),
    }
}

fn overlapping_share(gts: &[BBox]) -> f64 {
    let hit = (0..gts.len())
        .filter(|&i| (0..gts.len()).any(|k| k != i && iou(&gts[i], &gts[k]) > 0.0))
        .count();
    hit as f64 / gts.len() as f64
}

fn crowd_benchmark(o: &mut Outcome) {
    let start = Instant::now();
    let crowded = crowded_config(0..60);
    let crowd_runs = run_pipeline(&crowded).unwrap().runs;
    let mut sparse = crowded_config(1000..1060);
    sparse.scene.overlap = OverlapLevel::Sparse;
    let sparse_runs = run_pipeline(&sparse).unwrap().runs;
    let t = start.elapsed();

    let mut min_share: f64 = 1.0;
    for r in &crowd_runs {
        let gts = &r.prepared.scene.gts;
        o.check(gts.len() >= 20, format!("seed {} has {} objects", r.seed, gts.len()));
        min_share = min_share.min(overlapping_share(gts));
    }
    o.check(min_share >= 0.3, format!("a crowded scene has only {min_share:.2} overlapping objects"));

    let eval = &crowded.eval;
    let (mut dg, mut van, mut scenes) = (0.0, 0.0, 0);
    for r in &crowd_runs {
        let a = evaluate(&[single(r, &r.kept.dg)], eval).unwrap().recall_crowd;
        let b = evaluate(&[single(r, &r.kept.vanilla[0])], eval).unwrap().recall_crowd;
        if let (Some(a), Some(b)) = (a, b) {
            dg += a;
            van += b;
            scenes += 1;
        }
    }
    let (dg, van) = (dg / scenes as f64, van / scenes as f64);
    o.check(dg >= van, format!("crowd recall dg {dg:.4} < vanilla@0.5 {van:.4}"));

    let fp = |pick: &dyn Fn(&SceneRun) -> &[Detection]| {
        sparse_runs
            .iter()
            .map(|r| evaluate(&[single(r, pick(r))], eval).unwrap().false_positives as f64)
            .sum::<f64>()
            / sparse_runs.len() as f64
    };
    let fp_dg = fp(&|r| &r.kept.dg);
    let fp_van = fp(&|r| &r.kept.vanilla[1]);
    o.check(fp_dg <= fp_van, format!("sparse FP dg {fp_dg:.1} > vanilla@0.8 {fp_van:.1}"));
    o.check(t < Duration::from_secs(60), format!("pipeline took {}", secs(t)));
    o.note(format!(
        "{scenes} crowded scenes (min overlapping share {min_share:.2}): crowd recall dg {dg:.4} vs vanilla@0.5 {van:.4}; \
         sparse FP dg {fp_dg:.1} vs vanilla@0.8 {fp_van:.1}; {}",
        secs(t)
    ));
}

fn scored(x: f64, score: f64) -> Scored {
    Scored {
        bbox: BBox::new(x, 0.0, x + 10.0, 30.0).unwrap(),
        score,
    }
}

fn gt(x: f64) -> BBox {
    BBox::new(x, 0.0, x + 10.0, 30.0).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn metrics_fixtures(o: &mut Outcome) {
    // AP: TP, TP, FP, TP over three objects; precision 1, 1, 3/4 at recalls 1/3, 2/3, 1
    let img = ImageEval {
        dets: vec![scored(0.0, 0.9), scored(100.0, 0.8), scored(300.0, 0.7), scored(200.0, 0.6)],
        gts: vec![gt(0.0), gt(100.0), gt(200.0)],
    };
    let ap = ap50(std::slice::from_ref(&img)).unwrap();
    o.check(close(ap, (1.0 + 1.0 + 0.75) / 3.0), format!("AP {ap}"));
    let all_fp = ImageEval {
        dets: vec![scored(500.0, 0.9)],
        gts: vec![gt(0.0)],
    };
    o.check(ap50(&[all_fp]).unwrap() == 0.0, "all-FP AP");
    let perfect = ImageEval {
        dets: vec![scored(0.0, 0.9), scored(100.0, 0.8)],
        gts: vec![gt(0.0), gt(100.0)],
    };
    o.check(ap50(std::slice::from_ref(&perfect)).unwrap() == 1.0, "perfect AP");

    // MR: four images, one FP; miss rate 0.5 for FPPI < 0.25 and 0 from there
    let mut images = vec![ImageEval {
        dets: vec![scored(0.0, 0.9), scored(300.0, 0.8), scored(100.0, 0.7)],
        gts: vec![gt(0.0), gt(100.0)],
    }];
    images.extend(std::iter::repeat_n(ImageEval::default(), 3));
    let refs: Vec<f64> = (0..9).map(|k| 10f64.powf(-2.0 + 0.25 * k as f64)).collect();
    let log_sum: f64 = refs.iter().map(|&r| if r < 0.25 { 0.5f64.ln() } else { 1e-10f64.ln() }).sum();
    let mr = log_average_miss_rate(&images).unwrap();
    o.check(close(mr, (log_sum / 9.0).exp()), format!("MR {mr}"));
    o.check(log_average_miss_rate(std::slice::from_ref(&perfect)).unwrap() == 0.0, "perfect MR");
    let none = ImageEval {
        dets: vec![],
        gts: vec![gt(0.0)],
    };
    o.check(log_average_miss_rate(&[none]).unwrap() == 1.0, "empty MR");

    // JI: 8 detections, 10 objects, 7 matches
    let gts: Vec<BBox> = (0..10).map(|k| gt(100.0 * k as f64)).collect();
    let mut dets: Vec<Scored> = (0..7).map(|k| scored(100.0 * k as f64, 0.9)).collect();
    dets.push(scored(5000.0, 0.5));
    let ji = jaccard_index(&dets, &gts, MatchMode::Greedy);
    o.check(close(ji, 7.0 / 11.0), format!("JI {ji}"));

    // greedy 3x3 trace: d0 takes g0 (0.667 vs 0.538), d1 then only reaches g1 at 0.43
    let g = vec![gt(0.0), gt(5.0), gt(100.0)];
    let d = vec![scored(2.0, 0.9), scored(1.0, 0.8), scored(100.0, 0.7)];
    let m = match_detections(&d, &g, MATCH_IOU);
    o.check(m.det_to_gt == vec![Some(0), None, Some(2)], format!("greedy {:?}", m.det_to_gt));
    let opt = optimal_matching(&d, &g, MATCH_IOU);
    o.check(opt.matches() == 3, format!("optimal {:?}", opt.det_to_gt));
    o.check(close(jaccard_index(&d, &g, MatchMode::Greedy), 0.5), "greedy 3x3 JI");
}

fn performance(o: &mut Outcome) {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.count = 50;
    let p = simulate(&cfg, 0).unwrap();
    let n = p.grid.len();
    o.check(p.scene.gts.len() == 50 && n == 5456, format!("problem is {}x{n}", p.scene.gts.len()));
    let start = Instant::now();
    let out = assign_scene(&cfg, &p).unwrap();
    let t_solve = start.elapsed();
    o.check(t_solve < Duration::from_secs(1), format!("50x{n} assignment took {}", secs(t_solve)));
    o.check(out.plan.converged, "50-object solve did not converge");

    let mut sweep = ExperimentConfig::default();
    sweep.seeds = (0..100).collect();
    let values: Vec<String> = ["0.7/0.7", "0.8/0.8", "0.9/0.9", "0.7/0.8"].map(String::from).to_vec();
    let start = Instant::now();
    let rows = run_sweep(&sweep, "th", &values).unwrap();
    let t_sweep = start.elapsed();
    o.check(rows.len() == 4 * 3, format!("{} sweep rows", rows.len()));
    o.check(t_sweep < Duration::from_secs(300), format!("sweep took {}", secs(t_sweep)));
    o.note(format!(
        "50x{n} solve+assign {} ({} iterations); 4-value x 100-scene sweep {}",
        secs(t_solve),
        out.plan.iterations,
        secs(t_sweep)
    ));
}

fn run_cli(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_dga"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dga");
    assert!(out.status.success(), "dga {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn cli_session(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("exp.toml"), "seeds = [5, 6]\n[nms]\nsigma = 0.4\n").unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["simulate", "--config", "exp.toml", "--out-dir", "sim"],
        vec!["assign", "--scene", "sim/scene_5.json", "--predictions", "sim/predictions_5.json", "--out-dir", "sim"],
        vec!["nms", "--input", "sim/detections_5.jsonl", "--output", "sim/kept.jsonl", "--variant", "sqrt"],
        vec!["evaluate", "--detections", "sim/kept.jsonl", "--scene", "sim/scene_5.json", "--output", "sim/eval.json"],
        vec!["pipeline", "--config", "exp.toml", "--set", "uot.epsilon=0.5", "--out-dir", "run"],
        vec!["sweep", "--config", "exp.toml", "--axis", "variant", "--values", "s2,s,sqrt", "--out-dir", "sweep"],
    ];
    let mut outputs = Vec::new();
    for (k, args) in steps.iter().enumerate() {
        outputs.push((format!("stdout of step {k}"), run_cli(dir, args)));
    }
    let mut files = Vec::new();
    for sub in ["sim", "run", "sweep"] {
        for entry in std::fs::read_dir(dir.join(sub)).unwrap() {
            files.push(entry.unwrap().path());
        }
    }
    files.sort();
    for f in files {
        let name = f.strip_prefix(dir).unwrap().display().to_string();
        outputs.push((name, std::fs::read(&f).unwrap()));
    }
    outputs
}

fn determinism(o: &mut Outcome) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_session(a.path());
    let second = cli_session(b.path());
    o.check(first.len() == second.len(), "different file sets");
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        o.check(x == y, format!("{name} differs"));
    }
    o.note(format!("{} outputs compared byte for byte", first.len()));
}

fn main() {
    let scenes: Vec<SceneRun> = (0..100).map(|s| run_scene(&crowded_config(s..s + 1), s).unwrap()).collect();
    let criteria: Vec<(&str, Box<dyn Fn(&mut Outcome)>)> = vec![
        ("UOT oracle equivalence", Box::new(uot_oracle_equivalence)),
        ("overlap-aware cost exactness", Box::new(cost_exactness)),
        ("overlap preference scenario", Box::new(overlap_preference)),
        ("assignment decode", Box::new(assignment_decode)),
        ("DG-NMS equivalences", Box::new(|o: &mut Outcome| dg_nms_equivalences(o, &scenes))),
        ("directional crowd benchmark", Box::new(crowd_benchmark)),
        ("metrics correctness", Box::new(metrics_fixtures)),
        ("performance", Box::new(performance)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let mut o = Outcome::new();
        if let Err(e) = catch_unwind(AssertUnwindSafe(|| f(&mut o))) {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            o.failures.push(format!("panicked: {msg}"));
        }
        let status = if o.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = o.failures.iter().take(3).chain(&o.notes).cloned().collect::<Vec<_>>().join("; ");
        println!("criterion {}: {status} {name} ({detail})", k + 1);
        if !o.failures.is_empty() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}

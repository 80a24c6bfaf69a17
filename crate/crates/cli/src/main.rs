//! `dga`: run density-guided assignment experiments on synthetic scenes.
//!
//! Settings are resolved as built-in defaults, then `--config`, then each
//! `--set key=value` in order, then `--seed` and `--out-dir`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dga_core::assign::Label;
use dga_core::config::ExperimentConfig;
use dga_core::io::{
    read_json, read_jsonl, write_json, write_jsonl, DetectionRecord, PredictionsFile, SceneFile, SCHEMA_VERSION,
};
use dga_core::metrics::{evaluate, ImageEval, Scored};
use dga_core::nms::{dg_nms, vanilla_nms, Detection, ScaleVariant};
use dga_core::pipeline::{self, prepare, run_sweep, simulate, sweep_csv, write_artifacts};
use dga_core::{Error, Result};

/// Print to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "dga", version, about = "Density-guided anchor assignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene and per-anchor predictions.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the assignment for a saved scene and write labels and densities.
    Assign {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Suppress duplicates in a detection stream, per seed.
    Nms {
        /// JSON-lines detections with `seed`, `box`, `score`, `density`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Dg)]
        method: Method,
        /// Fixed IoU threshold for `vanilla`.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// `s2`, `s` or `sqrt`.
        #[arg(long, default_value = "s")]
        variant: ScaleVariant,
    },
    /// Score a detection stream against saved scenes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        /// Scene files; detections are matched to scenes by seed.
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run simulate, assign, suppress and evaluate for every seed.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline once per value of one parameter and tabulate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// th, th_pos, th_neg, variant, radius, sigma, epsilon, strategy,
        /// or any dotted config path.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dg,
    Vanilla,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set nms.sigma=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replace the configured seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(dir) = &self.out_dir {
            cfg.output_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at("write"))
}

fn cmd_simulate(common: &Common) -> Result<()> {
    let cfg = common.resolve().map_err(|e| e.at("config"))?;
    let dir = out_dir(&cfg);
    create_dir(&dir)?;
    for &seed in &cfg.seeds {
        let p = simulate(&cfg, seed)?;
        let scene = SceneFile {
            schema_version: SCHEMA_VERSION,
            scene: p.scene,
            anchors: cfg.anchors.clone(),
        };
        let preds = PredictionsFile {
            schema_version: SCHEMA_VERSION,
            seed,
            predictions: p.predictions,
        };
        (|| {
            write_json(&dir.join(format!("scene_{seed}.json")), &scene)?;
            write_json(&dir.join(format!("predictions_{seed}.json")), &preds)
        })()
        .map_err(|e| e.at("write"))?;
        say!(
            "seed {seed}: {} objects, {} crowd pairs, {} anchors",
            scene.scene.gts.len(),
            scene.scene.crowd_pairs,
            preds.predictions.len()
        );
    }
    Ok(())
}

fn cmd_assign(common: &Common, scene: &Path, predictions: &Path) -> Result<()> {
    let mut cfg = common.resolve().map_err(|e| e.at("config"))?;
    let (scene, preds) = (|| Ok((read_json::<SceneFile>(scene)?, read_json::<PredictionsFile>(predictions)?)))()
        .map_err(|e: Error| e.at("read"))?;
    cfg.anchors = scene.anchors;
    let seed = scene.scene.seed;
    let p = prepare(&cfg, scene.scene, preds.predictions)?;
    let out = pipeline::assign_scene(&cfg, &p)?;
    let dets = pipeline::detections(&cfg, &p, &out.density);

    let a = &out.assignment;
    let records = pipeline::assignment_records(seed, &p.grid, a);
    let density = pipeline::density_file(seed, &p.grid, &out.density);
    let det_records: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord::new(seed, d)).collect();
    let dir = out_dir(&cfg);
    create_dir(&dir)?;
    (|| {
        write_jsonl(&dir.join(format!("assignments_{seed}.jsonl")), &records)?;
        write_json(&dir.join(format!("density_{seed}.json")), &density)?;
        write_jsonl(&dir.join(format!("detections_{seed}.jsonl")), &det_records)
    })()
    .map_err(|e| e.at("write"))?;
    say!(
        "seed {seed}: {} positives, {} ignored, transported mass {:.4}, {} iterations{}",
        a.count(Label::Positive),
        a.count(Label::Ignore),
        out.plan.pi.sum(),
        out.plan.iterations,
        if out.plan.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

fn by_seed(records: Vec<DetectionRecord>) -> BTreeMap<u64, Vec<Detection>> {
    let mut groups: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in records {
        groups.entry(r.seed).or_default().push(r.detection());
    }
    groups
}

fn cmd_nms(
    input: &Path,
    output: &Path,
    method: Method,
    threshold: f64,
    sigma: f64,
    variant: ScaleVariant,
) -> Result<()> {
    let records = read_jsonl::<DetectionRecord>(input).map_err(|e| e.at("read"))?;
    let total = records.len();
    let mut kept = Vec::new();
    for (seed, dets) in by_seed(records) {
        let k = match method {
            Method::Dg => dg_nms(&dets, sigma, variant),
            Method::Vanilla => vanilla_nms(&dets, threshold),
        }
        .map_err(|e| e.at("nms"))?;
        kept.extend(k.iter().map(|d| DetectionRecord::new(seed, d)));
    }
    write_jsonl(output, &kept).map_err(|e| e.at("write"))?;
    say!("kept {} of {total} detections", kept.len());
    Ok(())
}

fn cmd_evaluate(common: &Common, detections: &Path, scenes: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let cfg = common.resolve().map_err(|e| e.at("config"))?;
    let records = read_jsonl::<DetectionRecord>(detections).map_err(|e| e.at("read"))?;
    let mut groups = by_seed(records);
    let mut images = Vec::new();
    for path in scenes {
        let scene = read_json::<SceneFile>(path).map_err(|e| e.at("read"))?.scene;
        let dets = groups.remove(&scene.seed).unwrap_or_default();
        images.push(ImageEval {
            dets: dets
                .iter()
                .map(|d| Scored {
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect(),
            gts: scene.gts,
        });
    }
    if let Some(seed) = groups.keys().next() {
        return Err(Error::Config(format!("detections for seed {seed} have no scene file")).at("evaluate"));
    }
    let report = evaluate(&images, &cfg.eval).map_err(|e| e.at("evaluate"))?;
    if let Some(path) = output {
        write_json(path, &report).map_err(|e| e.at("write"))?;
    }
    say!(
        "AP50 {:.4}  MR {:.4}  JI {:.4}  TP {}  FP {}  GT {}",
        report.ap50, report.mr, report.ji, report.true_positives, report.false_positives, report.num_gt
    );
    Ok(())
}

fn cmd_pipeline(common: &Common) -> Result<()> {
    let cfg = common.resolve().map_err(|e| e.at("config"))?;
    let out = pipeline::run_pipeline(&cfg)?;
    let dir = out_dir(&cfg);
    write_artifacts(&dir, &cfg, &out)?;
    let a = &out.report.assignment;
    say!(
        "{} scenes, {:.2} positives per object, {}/{} solves converged",
        out.report.seeds.len(),
        a.mean_positives_per_object,
        a.converged_solves,
        out.report.seeds.len()
    );
    for m in &out.report.methods {
        let r = &m.metrics;
        say!(
            "{:<14} AP50 {:.4}  MR {:.4}  JI {:.4}  kept {:.1}",
            m.method, r.ap50, r.mr, r.ji, m.mean_kept
        );
    }
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[String]) -> Result<()> {
    let cfg = common.resolve().map_err(|e| e.at("config"))?;
    let rows = run_sweep(&cfg, axis, values)?;
    let csv = sweep_csv(axis, &rows).map_err(|e| e.at("write"))?;
    let dir = out_dir(&cfg);
    create_dir(&dir)?;
    let name: String = axis.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    std::fs::write(dir.join(format!("sweep_{name}.csv")), &csv).map_err(|e| Error::from(e).at("write"))?;
    let _ = std::io::stdout().write_all(csv.as_bytes());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common } => cmd_simulate(common),
        Command::Assign {
            common,
            scene,
            predictions,
        } => cmd_assign(common, scene, predictions),
        Command::Nms {
            input,
            output,
            method,
            threshold,
            sigma,
            variant,
        } => cmd_nms(input, output, *method, *threshold, *sigma, *variant),
        Command::Evaluate {
            common,
            detections,
            scenes,
            output,
        } => cmd_evaluate(common, detections, scenes, output.as_deref()),
        Command::Pipeline { common } => cmd_pipeline(common),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis, values),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

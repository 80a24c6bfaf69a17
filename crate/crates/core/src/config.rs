//! Experiment configuration, read from TOML.
//!
//! Every section and field has a default, so a config file only needs the
//! values it changes. Unknown keys are rejected. [`ExperimentConfig::set`]
//! overrides a single field by dotted path and is what command-line flags
//! use; it is applied after the file is read, so flags win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_grid, AnchorGrid};
use crate::assign::{AssignStrategy, DetectionLossConfig, UotLossConfig};
use crate::cost::SoiTable;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::nms::ScaleVariant;
use crate::sim::{NoiseConfig, SceneConfig};
use crate::uot::{Regularizer, SolveOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub levels: Vec<i32>,
    pub strides: Vec<u32>,
    /// Anchor box side in strides (area `(scale * stride)^2`).
    pub scale: f64,
    /// Anchor box height over width.
    pub aspect: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            levels: vec![3, 4, 5, 6, 7],
            strides: vec![8, 16, 32, 64, 128],
            scale: 4.0,
            aspect: 3.0,
        }
    }
}

impl AnchorConfig {
    pub fn grid(&self, width: u32, height: u32) -> Result<AnchorGrid> {
        build_anchor_grid((width, height), &self.levels, &self.strides)
    }
}

/// How candidate (object, anchor) pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorMode {
    /// The `radius^2` anchors nearest the object center on every level.
    Center { radius: usize },
    /// Anchors whose anchor box overlaps the object above `threshold`.
    Iou { threshold: f64 },
}

impl Default for PriorMode {
    fn default() -> Self {
        PriorMode::Center { radius: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub prior: PriorMode,
    /// Weight of the overlap-aware cost against the level cost.
    pub gamma: f64,
    pub level_cost: bool,
    pub soi: SoiTable,
    /// Share of a size range, next to a shared edge, that also prefers the
    /// neighbouring level.
    pub band: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            prior: PriorMode::default(),
            gamma: 2.0,
            level_cost: true,
            soi: SoiTable::default_five_level(),
            band: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UotConfig {
    pub epsilon: f64,
    /// Marginal weight; `inf` gives the balanced problem.
    pub rho: f64,
    pub regularizer: Regularizer,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for UotConfig {
    fn default() -> Self {
        let solve = SolveOptions::default();
        Self {
            epsilon: 0.7,
            rho: 1.0,
            regularizer: Regularizer::default(),
            max_iterations: solve.max_iterations,
            tolerance: solve.tolerance,
        }
    }
}

impl UotConfig {
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub strategy: AssignStrategy,
    pub uot_loss: UotLossConfig,
    pub detection_loss: DetectionLossConfig,
}

/// Where a detection's density comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityLookup {
    /// The density of the anchor that produced the detection.
    #[default]
    Anchor,
    /// Bilinear sample of the anchor's level at the detection's center.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub sigma: f64,
    pub variant: ScaleVariant,
    /// Fixed thresholds of the baseline runs.
    pub vanilla_thresholds: Vec<f64>,
    pub density_lookup: DensityLookup,
    /// Predictions scoring below this never reach suppression.
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            variant: ScaleVariant::default(),
            vanilla_thresholds: vec![0.5, 0.8],
            density_lookup: DensityLookup::default(),
            score_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub anchors: AnchorConfig,
    pub noise: NoiseConfig,
    pub cost: CostConfig,
    pub uot: UotConfig,
    pub assign: AssignConfig,
    pub nms: NmsConfig,
    pub eval: EvalOptions,
    /// One scene per seed.
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            anchors: AnchorConfig::default(),
            noise: NoiseConfig::default(),
            cost: CostConfig::default(),
            uot: UotConfig::default(),
            assign: AssignConfig::default(),
            nms: NmsConfig::default(),
            eval: EvalOptions::default(),
            seeds: vec![0],
            output_dir: None,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.anchors.grid(self.scene.image_width, self.scene.image_height)?;
        check(self.anchors.scale > 0.0 && self.anchors.aspect > 0.0, || {
            "anchor scale and aspect must be > 0".into()
        })?;

        match self.cost.prior {
            PriorMode::Center { radius } => check(radius >= 1, || "center prior radius must be >= 1".into())?,
            PriorMode::Iou { threshold } => check((0.0..1.0).contains(&threshold), || {
                format!("IoU prior threshold must lie in [0, 1), got {threshold}")
            })?,
        }
        check(self.cost.gamma >= 0.0 && self.cost.gamma.is_finite(), || {
            format!("cost gamma must be finite and >= 0, got {}", self.cost.gamma)
        })?;
        self.cost.soi.clone().validated()?;
        check((0.0..=0.5).contains(&self.cost.band), || {
            format!("level band must lie in [0, 0.5], got {}", self.cost.band)
        })?;
        if self.cost.level_cost {
            let (first, last) = (self.anchors.levels[0], self.anchors.levels[self.anchors.levels.len() - 1]);
            let ranges = self.cost.soi.ranges();
            check(ranges[0].level >= first && ranges[ranges.len() - 1].level <= last, || {
                "size-of-interest levels must be anchor levels".into()
            })?;
        }

        let u = &self.uot;
        check(u.epsilon > 0.0 && u.epsilon.is_finite(), || format!("epsilon must be > 0, got {}", u.epsilon))?;
        check(u.rho > 0.0, || format!("marginal weight must be > 0, got {}", u.rho))?;
        check(u.max_iterations >= 1, || "max_iterations must be >= 1".into())?;
        check(u.tolerance > 0.0, || "tolerance must be > 0".into())?;

        self.assign.strategy.validate()?;
        let d = &self.assign.detection_loss;
        check(d.gamma1 >= 0.0 && d.gamma2 >= 0.0, || "loss weights must be >= 0".into())?;

        let n = &self.nms;
        check(n.sigma > 0.0 && n.sigma.is_finite(), || format!("decay scale must be > 0, got {}", n.sigma))?;
        for t in &n.vanilla_thresholds {
            check(*t > 0.0 && *t < 1.0, || format!("NMS threshold must lie in (0, 1), got {t}"))?;
        }
        check((0.0..1.0).contains(&n.score_floor), || {
            format!("score floor must lie in [0, 1), got {}", n.score_floor)
        })?;
        check(!self.seeds.is_empty(), || "at least one seed is required".into())?;
        Ok(())
    }

    /// Override one field by dotted path, e.g. `uot.epsilon` or
    /// `assign.strategy.th_pos`. The value is read as a TOML value when it
    /// parses as one and as a string otherwise. The result is validated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = parse_value(value);
        let mut root = toml::Value::try_from(&*self)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (k, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}' does not name a config field")))?;
            if k + 1 == parts.len() {
                table.insert((*part).to_string(), parsed.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{key}'")))?;
        }
        let next: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("cannot set '{key}' to '{value}': {}", e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

//! Synthetic crowded scenes standing in for a trained detector.
//!
//! A scene is a set of person-shaped ground-truth boxes, some of them placed
//! as overlapping pairs. Every anchor "predicts" a perturbed copy of its
//! nearest object; the perturbation grows with the anchor's distance from
//! that object, so prediction quality falls off spatially the way a real
//! detector's does. Everything is a pure function of its config and seed.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{iou, pairwise_iou, BBox};
use crate::uot::TransportPlan;

/// IoU above which two objects count as a crowded pair.
pub const CROWD_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapLevel {
    Sparse,
    Moderate,
    Crowded,
}

impl OverlapLevel {
    /// Default share of objects placed as the overlapping partner of another.
    pub fn default_fraction(self) -> f64 {
        match self {
            OverlapLevel::Sparse => 0.0,
            OverlapLevel::Moderate => 0.2,
            OverlapLevel::Crowded => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub count: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub min_height: f64,
    pub max_height: f64,
    /// Height over width of each object.
    pub aspect: f64,
    pub overlap: OverlapLevel,
    /// Overrides the level's default partner fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_fraction: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            count: 20,
            image_width: 512,
            image_height: 512,
            min_height: 48.0,
            max_height: 160.0,
            aspect: 3.0,
            overlap: OverlapLevel::Crowded,
            overlap_fraction: None,
        }
    }
}

impl SceneConfig {
    pub fn partner_fraction(&self) -> f64 {
        self.overlap_fraction.unwrap_or(self.overlap.default_fraction())
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if !(self.min_height > 0.0 && self.min_height <= self.max_height) {
            return Err(Error::Config("object heights need 0 < min_height <= max_height".into()));
        }
        if !(self.aspect > 0.0) {
            return Err(Error::Config("object aspect must be > 0".into()));
        }
        if self.max_height + 2.0 >= self.image_height as f64
            || self.max_height / self.aspect + 2.0 >= self.image_width as f64
        {
            return Err(Error::Config("objects do not fit inside the image".into()));
        }
        let f = self.partner_fraction();
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("overlap fraction must lie in [0, 1), got {f}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_width: u32,
    pub image_height: u32,
    pub gts: Vec<BBox>,
    /// Number of object pairs overlapping above [`CROWD_IOU`].
    pub crowd_pairs: usize,
    pub seed: u64,
}

impl Scene {
    /// Build a scene from explicit boxes, computing its crowd statistics.
    pub fn from_boxes(image_width: u32, image_height: u32, gts: Vec<BBox>, seed: u64) -> Result<Self> {
        if gts.is_empty() {
            return Err(Error::EmptyInput("scene has no objects"));
        }
        if let Some(b) = gts.iter().find(|b| !b.inside(image_width as f64, image_height as f64)) {
            return Err(Error::Config(format!("object {b:?} is not inside the image")));
        }
        let crowd_pairs = count_crowd_pairs(&gts);
        Ok(Self {
            image_width,
            image_height,
            gts,
            crowd_pairs,
            seed,
        })
    }

    /// Per object: does it overlap some other object above [`CROWD_IOU`]?
    pub fn crowd_flags(&self) -> Vec<bool> {
        crowd_flags(&self.gts)
    }
}

pub fn count_crowd_pairs(gts: &[BBox]) -> usize {
    let mut pairs = 0;
    for i in 0..gts.len() {
        for j in i + 1..gts.len() {
            if iou(&gts[i], &gts[j]) > CROWD_IOU {
                pairs += 1;
            }
        }
    }
    pairs
}

pub fn crowd_flags(gts: &[BBox]) -> Vec<bool> {
    (0..gts.len())
        .map(|i| (0..gts.len()).any(|k| k != i && iou(&gts[i], &gts[k]) > CROWD_IOU))
        .collect()
}

/// Place `count` objects: non-touching "base" objects first, then partners,
/// each a same-size copy of an earlier object shifted sideways so the pair's
/// IoU hits a target drawn from `[0.3, 0.7]`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_img, h_img) = (config.image_width as f64, config.image_height as f64);
    let partners = (config.partner_fraction() * config.count as f64).round() as usize;
    let partners = partners.min(config.count - 1);
    let bases = config.count - partners;
    let max_attempts = 1000 * config.count;
    let mut attempts = 0;

    let mut gts: Vec<BBox> = Vec::with_capacity(config.count);
    while gts.len() < bases {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Packing {
                requested: config.count,
                attempts,
            });
        }
        let h = rng.random_range(config.min_height..=config.max_height);
        let w = h / config.aspect;
        let x1 = rng.random_range(1.0..w_img - w - 1.0);
        let y1 = rng.random_range(1.0..h_img - h - 1.0);
        let b = BBox::new(x1, y1, x1 + w, y1 + h)?;
        // base objects keep a one-pixel gap from each other
        let padded = BBox::new(x1 - 1.0, y1 - 1.0, x1 + w + 1.0, y1 + h + 1.0)?;
        if gts.iter().all(|g| iou(g, &padded) == 0.0) {
            gts.push(b);
        }
    }
    while gts.len() < config.count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Packing {
                requested: config.count,
                attempts,
            });
        }
        let parent = gts[rng.random_range(0..gts.len())];
        let target: f64 = rng.random_range(0.3..=0.7);
        let shift = parent.width() * (1.0 - target) / (1.0 + target);
        let dx = if rng.random_bool(0.5) { shift } else { -shift };
        let b = parent.translate(dx, 0.0)?;
        if b.inside(w_img, h_img) {
            gts.push(b);
        }
    }
    Scene::from_boxes(config.image_width, config.image_height, gts, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Center jitter, as a fraction of object width/height.
    pub position: f64,
    /// Log-scale jitter of width and height.
    pub scale: f64,
    /// Half-width of the uniform noise added to the score.
    pub score: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position: 0.1,
            scale: 0.1,
            score: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Object this anchor was regressing toward.
    pub target: usize,
}

/// Index of the object whose center is closest to `(x, y)`, ties by index.
pub fn nearest_object(gts: &[BBox], x: f64, y: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, g) in gts.iter().enumerate() {
        let (cx, cy) = g.center();
        let d = (cx - x).powi(2) + (cy - y).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// One predicted box and score per anchor.
///
/// Jitter standard deviations scale with `1 + distance / (w + h)` between
/// the anchor and its target object. Scores are the prediction's IoU with the
/// target plus bounded uniform noise, clipped to `[1e-4, 1]`.
pub fn simulate_predictions(scene: &Scene, grid: &AnchorGrid, noise: &NoiseConfig, seed: u64) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    grid.anchors
        .iter()
        .map(|a| {
            let target = nearest_object(&scene.gts, a.cx, a.cy);
            let gt = scene.gts[target];
            let (gx, gy) = gt.center();
            let distance = ((gx - a.cx).powi(2) + (gy - a.cy).powi(2)).sqrt();
            let growth = 1.0 + distance / (gt.width() + gt.height());
            let cx = gx + noise.position * gt.width() * growth * truncated_normal(&mut rng);
            let cy = gy + noise.position * gt.height() * growth * truncated_normal(&mut rng);
            let w = gt.width() * (noise.scale * growth * truncated_normal(&mut rng)).exp();
            let h = gt.height() * (noise.scale * growth * truncated_normal(&mut rng)).exp();
            let bbox = BBox::from_center(cx, cy, w, h).expect("jittered boxes keep positive size");
            let jitter = if noise.score > 0.0 {
                rng.random_range(-noise.score..=noise.score)
            } else {
                0.0
            };
            Prediction {
                bbox,
                score: (iou(&bbox, &gt) + jitter).clamp(1e-4, 1.0),
                target,
            }
        })
        .collect()
}

/// Per-anchor densities with their pyramid position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub values: Vec<f64>,
    /// `(level, row, col)` per anchor.
    pub index: Vec<(i32, usize, usize)>,
}

impl DensityMap {
    pub fn from_values(values: Vec<f64>, grid: &AnchorGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                context: "density map",
                expected: (grid.len(), 1),
                got: (values.len(), 1),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProblem("densities must be finite and nonnegative".into()));
        }
        Ok(Self {
            values,
            index: grid.anchors.iter().map(|a| (a.level, a.row, a.col)).collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear sample of one level's map at image point `(x, y)`.
    pub fn bilinear(&self, grid: &AnchorGrid, level: i32, x: f64, y: f64) -> f64 {
        let Some(lv) = grid.level(level) else {
            return 0.0;
        };
        let s = lv.stride as f64;
        let gx = (x / s - 0.5).clamp(0.0, (lv.cols - 1) as f64);
        let gy = (y / s - 0.5).clamp(0.0, (lv.rows - 1) as f64);
        let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(lv.cols - 1), (r0 + 1).min(lv.rows - 1));
        let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
        let at = |r: usize, c: usize| self.values[lv.offset + r * lv.cols + c];
        (1.0 - ty) * ((1.0 - tx) * at(r0, c0) + tx * at(r0, c1)) + ty * ((1.0 - tx) * at(r1, c0) + tx * at(r1, c1))
    }
}

/// Reconstructed density: the column sums of the plan.
pub fn density_from_plan(plan: &TransportPlan, grid: &AnchorGrid) -> Result<DensityMap> {
    DensityMap::from_values(plan.column_sums().to_vec(), grid)
}

/// Stand-in for a learned density map: each object spreads one unit of mass
/// over its candidate anchors in proportion to their prediction IoU with it.
pub fn density_prior(phi: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<Vec<f64>> {
    if phi.dim() != mask.dim() {
        return Err(Error::Dimension {
            context: "density prior",
            expected: phi.dim(),
            got: mask.dim(),
        });
    }
    let (m, n) = phi.dim();
    let mut b = vec![0.0; n];
    for i in 0..m {
        let total: f64 = (0..n).filter(|&j| mask[[i, j]]).map(|j| phi[[i, j]]).sum();
        if total <= 0.0 {
            continue;
        }
        for j in (0..n).filter(|&j| mask[[i, j]]) {
            b[j] += phi[[i, j]] / total;
        }
    }
    Ok(b)
}

/// IoU of every object with every anchor's prediction.
pub fn prediction_ious(scene: &Scene, predictions: &[Prediction]) -> Result<Array2<f64>> {
    let boxes: Vec<BBox> = predictions.iter().map(|p| p.bbox).collect();
    pairwise_iou(&scene.gts, &boxes)
}

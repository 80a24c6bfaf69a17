//! On-disk formats: versioned JSON documents and JSON-lines record streams.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::LevelGrid;
use crate::assign::Label;
use crate::config::AnchorConfig;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nms::Detection;
use crate::sim::{Prediction, Scene};

/// Version stamped on every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

pub trait Versioned {
    fn schema_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
        })*
    };
}

/// A scene together with the anchor layout its predictions refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub scene: Scene,
    pub anchors: AnchorConfig,
}

/// One prediction per anchor, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub schema_version: u32,
    pub seed: u64,
    pub predictions: Vec<Prediction>,
}

/// Per-anchor density with the level layout needed to index it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityFile {
    pub schema_version: u32,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub levels: Vec<LevelGrid>,
    pub values: Vec<f64>,
}

versioned!(SceneFile, PredictionsFile, DensityFile);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Scene (image) the detection belongs to.
    pub seed: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub density: f64,
}

impl DetectionRecord {
    pub fn new(seed: u64, d: &Detection) -> Self {
        Self {
            seed,
            bbox: d.bbox,
            score: d.score,
            density: d.density,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            score: self.score,
            density: self.density,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub seed: u64,
    pub anchor: usize,
    pub level: i32,
    pub row: usize,
    pub col: usize,
    pub label: Label,
    pub matched_gt: Option<usize>,
    pub weight: Option<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read a JSON document and reject versions this build does not know.
pub fn read_json<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    let value: T = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if value.schema_version() != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{} has schema version {}, expected {SCHEMA_VERSION}",
            path.display(),
            value.schema_version()
        )));
    }
    Ok(value)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

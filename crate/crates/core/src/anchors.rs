//! Multi-level anchor grids: one anchor point per stride cell per pyramid level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub level: i32,
    pub stride: u32,
    pub row: usize,
    pub col: usize,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub level: i32,
    pub stride: u32,
    pub rows: usize,
    pub cols: usize,
    /// Index of this level's first anchor in the flattened anchor list.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub width: u32,
    pub height: u32,
    pub levels: Vec<LevelGrid>,
    pub anchors: Vec<Anchor>,
}

/// Lay anchors at cell centers, level by level, row-major within a level.
pub fn build_anchor_grid(image_size: (u32, u32), levels: &[i32], strides: &[u32]) -> Result<AnchorGrid> {
    let (width, height) = image_size;
    if width == 0 || height == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    if levels.is_empty() || levels.len() != strides.len() {
        return Err(Error::Config(format!(
            "need one stride per level, got {} levels and {} strides",
            levels.len(),
            strides.len()
        )));
    }
    if levels.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Config(format!("levels must be contiguous, got {levels:?}")));
    }
    if let Some(s) = strides.iter().find(|s| !s.is_power_of_two()) {
        return Err(Error::Config(format!("stride {s} is not a power of two")));
    }

    let mut grids = Vec::with_capacity(levels.len());
    let mut anchors = Vec::new();
    for (&level, &stride) in levels.iter().zip(strides) {
        let cols = width.div_ceil(stride) as usize;
        let rows = height.div_ceil(stride) as usize;
        grids.push(LevelGrid {
            level,
            stride,
            rows,
            cols,
            offset: anchors.len(),
        });
        let s = stride as f64;
        for row in 0..rows {
            for col in 0..cols {
                anchors.push(Anchor {
                    level,
                    stride,
                    row,
                    col,
                    cx: (col as f64 + 0.5) * s,
                    cy: (row as f64 + 0.5) * s,
                });
            }
        }
    }
    Ok(AnchorGrid {
        width,
        height,
        levels: grids,
        anchors,
    })
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchor_levels(&self) -> Vec<i32> {
        self.anchors.iter().map(|a| a.level).collect()
    }

    pub fn level(&self, level: i32) -> Option<&LevelGrid> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Prior box at anchor `j`: area `(scale * stride)^2`, height/width = `aspect`.
    pub fn anchor_box(&self, j: usize, scale: f64, aspect: f64) -> BBox {
        let a = &self.anchors[j];
        let side = scale * a.stride as f64;
        let w = side / aspect.sqrt();
        let h = side * aspect.sqrt();
        BBox::from_center(a.cx, a.cy, w, h).expect("anchor boxes have positive size")
    }

    pub fn anchor_boxes(&self, scale: f64, aspect: f64) -> Vec<BBox> {
        (0..self.len()).map(|j| self.anchor_box(j, scale, aspect)).collect()
    }
}

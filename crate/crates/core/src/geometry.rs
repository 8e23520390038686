//! Box arithmetic, contextual-region selection and pair geometry features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BoundingBox;

pub const DEFAULT_TAU_U: f64 = 0.7;
pub const DEFAULT_MAX_REGIONS: usize = 30;
pub const GEOMETRY_DIM: usize = 5;

/// Candidate contextual box with its objectness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Intersection over union on continuous areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Keeps proposals whose IoU with both person boxes is below `tau_u`, then
/// caps the result at the `max_regions` highest-objectness survivors.
///
/// Output is sorted by descending objectness; equal objectness keeps input
/// order.
pub fn select_contextual_regions(
    proposals: &[RegionProposal],
    b1: &BoundingBox,
    b2: &BoundingBox,
    tau_u: f64,
    max_regions: usize,
) -> Vec<RegionProposal> {
    let mut kept: Vec<RegionProposal> = proposals
        .iter()
        .filter(|c| iou(&c.bbox, b1).max(iou(&c.bbox, b2)) < tau_u)
        .copied()
        .collect();
    kept.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    kept.truncate(max_regions);
    kept
}

/// Raw relative geometry `[x_min/W, y_min/H, x_max/W, y_max/H, area/(W*H)]`.
pub fn encode_geometry(bbox: &BoundingBox, image_width: f64, image_height: f64) -> [f64; GEOMETRY_DIM] {
    [
        bbox.x_min / image_width,
        bbox.y_min / image_height,
        bbox.x_max / image_width,
        bbox.y_max / image_height,
        bbox.area() / (image_width * image_height),
    ]
}

/// Per-dimension standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryNormStats {
    pub mean: [f64; GEOMETRY_DIM],
    pub std: [f64; GEOMETRY_DIM],
    /// How the raw feature is formed before standardization.
    pub encoding: String,
}

impl Default for GeometryNormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; GEOMETRY_DIM],
            std: [1.0; GEOMETRY_DIM],
            encoding: ENCODING.to_string(),
        }
    }
}

const ENCODING: &str = "relative coordinates and relative area, then per-dimension z-score";

impl GeometryNormStats {
    pub fn new(mean: [f64; GEOMETRY_DIM], std: [f64; GEOMETRY_DIM]) -> Result<Self> {
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid geometry statistics: std {std:?}")));
        }
        Ok(Self { mean, std, encoding: ENCODING.to_string() })
    }

    /// Population mean and standard deviation of the raw features. Constant
    /// dimensions get a unit deviation.
    pub fn fit(raw: &[[f64; GEOMETRY_DIM]]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptySplit);
        }
        let n = raw.len() as f64;
        let mut mean = [0.0; GEOMETRY_DIM];
        let mut std = [0.0; GEOMETRY_DIM];
        for d in 0..GEOMETRY_DIM {
            mean[d] = raw.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self::new(mean, std)
    }

    pub fn normalize(&self, raw: &[f64; GEOMETRY_DIM]) -> [f64; GEOMETRY_DIM] {
        std::array::from_fn(|d| (raw[d] - self.mean[d]) / self.std[d])
    }

    pub fn denormalize(&self, z: &[f64; GEOMETRY_DIM]) -> [f64; GEOMETRY_DIM] {
        std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d])
    }

    /// Concatenated normalized features of both boxes, `b1` first.
    pub fn pair_feature(&self, b1: &BoundingBox, b2: &BoundingBox, width: f64, height: f64) -> [f64; 2 * GEOMETRY_DIM] {
        let g1 = self.normalize(&encode_geometry(b1, width, height));
        let g2 = self.normalize(&encode_geometry(b2, width, height));
        let mut out = [0.0; 2 * GEOMETRY_DIM];
        out[..GEOMETRY_DIM].copy_from_slice(&g1);
        out[GEOMETRY_DIM..].copy_from_slice(&g2);
        out
    }
}

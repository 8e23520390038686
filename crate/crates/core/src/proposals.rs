//! Sliding-window region proposals for images without a proposal file.
//!
//! Windows of a few sizes are slid over an activation map (an image or a
//! backbone feature map); each window is scored by its mean activation
//! energy relative to the map's mean energy, squashed into `[0, 1)`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::geometry::RegionProposal;
use crate::types::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowConfig {
    /// Window sides as fractions of the shorter map side.
    pub scales: Vec<f64>,
    /// Step as a fraction of the window side.
    pub stride_fraction: f64,
    pub max_proposals: usize,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self { scales: vec![0.2, 0.35, 0.5], stride_fraction: 0.5, max_proposals: 60 }
    }
}

/// Summed-area table of per-cell energy for O(1) window sums.
fn integral_energy<T: Copy + Into<f64>>(map: &Array3<T>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let mut table = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            let e: f64 = (0..c).map(|ch| map[[ch, y, x]].into().powi(2)).sum();
            table[[y + 1, x + 1]] = e + table[[y, x + 1]] + table[[y + 1, x]] - table[[y, x]];
        }
    }
    table
}

/// Scores windows over `map` (channels x height x width) and returns the
/// strongest, in map coordinates, by descending objectness.
pub fn sliding_window_proposals<T: Copy + Into<f64>>(map: &Array3<T>, config: &SlidingWindowConfig) -> Vec<RegionProposal> {
    let (_, h, w) = map.dim();
    if h == 0 || w == 0 {
        return Vec::new();
    }
    let table = integral_energy(map);
    let mean_energy = table[[h, w]] / (h * w) as f64;
    let short = h.min(w) as f64;
    let mut out = Vec::new();
    for &scale in &config.scales {
        let side = ((scale * short).round() as usize).clamp(1, h.min(w));
        let step = ((side as f64 * config.stride_fraction).round() as usize).max(1);
        let mut y = 0;
        while y + side <= h {
            let mut x = 0;
            while x + side <= w {
                let sum = table[[y + side, x + side]] - table[[y, x + side]] - table[[y + side, x]] + table[[y, x]];
                let energy = sum / (side * side) as f64;
                let ratio = if mean_energy > 0.0 { energy / mean_energy } else { 0.0 };
                out.push(RegionProposal {
                    bbox: BoundingBox {
                        x_min: x as f64,
                        y_min: y as f64,
                        x_max: (x + side) as f64,
                        y_max: (y + side) as f64,
                    },
                    objectness: ratio / (1.0 + ratio),
                });
                x += step;
            }
            y += step;
        }
    }
    out.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    out.truncate(config.max_proposals);
    out
}

use serde::{Deserialize, Serialize};

use crate::data::DensityMap;
use crate::error::{Error, Result};

pub const REGION_NAMES: [&str; 3] = ["far", "mid", "near"];

/// Integral of a density map.
pub fn count_from_density(d: &DensityMap) -> f64 {
    d.values.iter().sum()
}

/// `(MAE, MSE)` over `(gt, pred)` count pairs, where MSE is the root of the
/// mean squared error.
pub fn compute_mae_mse(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::contract("MAE/MSE need at least one count pair"));
    }
    let k = pairs.len() as f64;
    let mae = pairs.iter().map(|(g, p)| (g - p).abs()).sum::<f64>() / k;
    let mse = (pairs.iter().map(|(g, p)| (g - p).powi(2)).sum::<f64>() / k).sqrt();
    Ok((mae, mse))
}

/// Horizontal band split, top (far) to bottom (near). A row belongs to the
/// band containing its center `(r + 0.5) / h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionBands {
    /// Fractions of the height separating far|mid and mid|near.
    pub boundaries: [f64; 2],
}

impl Default for RegionBands {
    fn default() -> Self {
        Self {
            boundaries: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl RegionBands {
    pub fn validate(&self) -> Vec<String> {
        let [a, b] = self.boundaries;
        if 0.0 < a && a < b && b < 1.0 {
            Vec::new()
        } else {
            vec![format!("eval.bands.boundaries must satisfy 0 < a < b < 1, got [{a}, {b}]")]
        }
    }

    pub fn band_of_row(&self, row: usize, height: usize) -> usize {
        let c = (row as f64 + 0.5) / height as f64;
        if c < self.boundaries[0] {
            0
        } else if c < self.boundaries[1] {
            1
        } else {
            2
        }
    }
}

/// Per-band partial counts and absolute errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBreakdown {
    pub gt: [f64; 3],
    pub pred: [f64; 3],
    pub abs_error: [f64; 3],
}

pub fn region_errors(pred: &DensityMap, gt: &DensityMap, bands: &RegionBands) -> Result<RegionBreakdown> {
    if !pred.same_shape(gt) {
        return Err(Error::contract(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if pred.height < 3 {
        return Err(Error::contract(format!("region split needs at least 3 rows, got {}", pred.height)));
    }
    let problems = bands.validate();
    if !problems.is_empty() {
        return Err(Error::contract(problems.join("; ")));
    }
    let mut out = RegionBreakdown {
        gt: [0.0; 3],
        pred: [0.0; 3],
        abs_error: [0.0; 3],
    };
    let w = pred.width;
    for r in 0..pred.height {
        let b = bands.band_of_row(r, pred.height);
        out.gt[b] += gt.values[r * w..(r + 1) * w].iter().sum::<f64>();
        out.pred[b] += pred.values[r * w..(r + 1) * w].iter().sum::<f64>();
    }
    for b in 0..3 {
        out.abs_error[b] = (out.gt[b] - out.pred[b]).abs();
    }
    Ok(out)
}

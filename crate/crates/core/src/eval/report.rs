use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_mae_mse, count_from_density, region_errors, RegionBands, REGION_NAMES};
use crate::data::{apply_roi_mask, ground_truth_at_scale, CrowdSample, DensityMap, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::model::{MsfaNet, ParameterStore, OUTPUT_STRIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Add far/mid/near band MAEs to the report.
    pub regions: bool,
    pub bands: RegionBands,
    /// Spread of the ground-truth maps used for the region split.
    pub sigma: f64,
    /// Zero predictions outside a sample's ROI before counting.
    pub roi_mask: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            regions: false,
            bands: RegionBands::default(),
            sigma: DEFAULT_SIGMA,
            roi_mask: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageResult>,
    pub mae: f64,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_mae: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A report plus the (masked) predicted density maps, in sample order.
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<DensityMap>,
}

struct ImageEval {
    result: ImageResult,
    prediction: DensityMap,
    regions: Option<[f64; 3]>,
}

fn evaluate_one(net: &MsfaNet, params: &ParameterStore, s: &CrowdSample, opts: &EvalOptions) -> Result<ImageEval> {
    let mut pred = net.predict(params, &s.image)?;
    let roi = s.roi.as_ref().filter(|_| opts.roi_mask);
    if let Some(roi) = roi {
        pred = apply_roi_mask(&pred, roi)?;
    }
    let gt_map = if opts.regions || roi.is_some() {
        let g = ground_truth_at_scale(&s.annotations, opts.sigma, OUTPUT_STRIDE)?;
        Some(match roi {
            Some(r) => apply_roi_mask(&g, r)?,
            None => g,
        })
    } else {
        None
    };
    // Unmasked ground truth is the exact annotation count.
    let gt_count = match (roi, &gt_map) {
        (Some(_), Some(g)) => count_from_density(g),
        _ => s.count() as f64,
    };
    let regions = match (&gt_map, opts.regions) {
        (Some(g), true) => Some(region_errors(&pred, g, &opts.bands)?.abs_error),
        _ => None,
    };
    Ok(ImageEval {
        result: ImageResult {
            id: s.id.clone(),
            gt_count,
            pred_count: count_from_density(&pred),
        },
        prediction: pred,
        regions,
    })
}

/// Runs the model on each full image (reflect-padded, no tiling). Images are
/// processed in parallel on the current rayon pool; results keep sample order.
pub fn evaluate(net: &MsfaNet, params: &ParameterStore, samples: &[CrowdSample], opts: &EvalOptions) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let evals: Vec<ImageEval> = samples.par_iter().map(|s| evaluate_one(net, params, s, opts)).collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = evals.iter().map(|e| (e.result.gt_count, e.result.pred_count)).collect();
    let (mae, mse) = compute_mae_mse(&pairs)?;
    let region_mae = opts.regions.then(|| {
        let k = evals.len() as f64;
        REGION_NAMES
            .iter()
            .enumerate()
            .map(|(b, name)| (name.to_string(), evals.iter().map(|e| e.regions.expect("computed")[b]).sum::<f64>() / k))
            .collect()
    });
    let (per_image, predictions) = evals.into_iter().map(|e| (e.result, e.prediction)).unzip();
    Ok(Evaluation {
        report: EvalReport {
            per_image,
            mae,
            mse,
            region_mae,
        },
        predictions,
    })
}

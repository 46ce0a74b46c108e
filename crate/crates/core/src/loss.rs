//! Euclidean density loss, locality-aware window loss and the pooled objective.

use serde::{Deserialize, Serialize};

use crate::data::DensityMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub window: usize,
    pub stride: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            window: 4,
            stride: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("loss.alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.window == 0 {
            problems.push("loss.window must be >= 1".to_owned());
        }
        if self.stride == 0 {
            problems.push("loss.stride must be >= 1".to_owned());
        }
        problems
    }
}

/// Which loss a training run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_E` alone.
    Euclidean,
    /// `α·L_E + L_P`.
    Total,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Euclidean => "euclidean",
            Objective::Total => "total",
        }
    }

    pub fn value(self, pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<f64> {
        match self {
            Objective::Euclidean => euclidean_loss(pred, gt),
            Objective::Total => total_loss(pred, gt, cfg),
        }
    }

    pub fn gradient(self, pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
        match self {
            Objective::Euclidean => euclidean_loss_grad(pred, gt),
            Objective::Total => total_loss_grad(pred, gt, cfg),
        }
    }
}

fn check_batch(pred: &[DensityMap], gt: &[DensityMap]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("batch size mismatch: {} predictions, {} targets", pred.len(), gt.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.height != g.height || p.width != g.width {
            return Err(Error::contract(format!(
                "sample {i}: prediction {}x{} vs target {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
    }
    Ok(())
}

fn squared_distance(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `(1/K) Σ_i ‖pred_i − gt_i‖²`.
pub fn euclidean_loss(pred: &[DensityMap], gt: &[DensityMap]) -> Result<f64> {
    check_batch(pred, gt)?;
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| squared_distance(&p.values, &g.values)).sum();
    Ok(total / pred.len() as f64)
}

pub fn euclidean_loss_grad(pred: &[DensityMap], gt: &[DensityMap]) -> Result<Vec<Vec<f64>>> {
    check_batch(pred, gt)?;
    let k = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.values.iter().zip(&g.values).map(|(a, b)| 2.0 * (a - b) / k).collect())
        .collect())
}

/// `‖pred − gt‖² / (Σ gt + 1)` for one window (flattened, same length).
pub fn la_loss_window(pred_win: &[f64], gt_win: &[f64]) -> Result<f64> {
    if pred_win.len() != gt_win.len() {
        return Err(Error::contract(format!("window sizes differ: {} vs {}", pred_win.len(), gt_win.len())));
    }
    Ok(squared_distance(pred_win, gt_win) / (gt_win.iter().sum::<f64>() + 1.0))
}

/// Top-left corners of the window grid; the map is implicitly zero-padded so
/// the last window reaches the edge.
fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts[starts.len() - 1] + window < len {
        let next = starts[starts.len() - 1] + stride;
        starts.push(next);
    }
    starts
}

/// Visits every window of one sample with its cell indices (cells falling in
/// the zero padding are skipped; they contribute nothing to either side).
fn for_each_window(height: usize, width: usize, cfg: &LossConfig, mut f: impl FnMut(&[usize])) {
    let mut cells = Vec::with_capacity(cfg.window * cfg.window);
    for &y0 in &window_starts(height, cfg.window, cfg.stride) {
        for &x0 in &window_starts(width, cfg.window, cfg.stride) {
            cells.clear();
            for y in y0..(y0 + cfg.window).min(height) {
                for x in x0..(x0 + cfg.window).min(width) {
                    cells.push(y * width + x);
                }
            }
            f(&cells);
        }
    }
}

fn check_config(cfg: &LossConfig) -> Result<()> {
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::contract(problems.join("; ")))
    }
}

/// Per sample, the sum of window losses over the window grid; mean over the batch.
pub fn pooling_loss(pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<f64> {
    check_batch(pred, gt)?;
    check_config(cfg)?;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for_each_window(p.height, p.width, cfg, |cells| {
            let diff: f64 = cells.iter().map(|&i| (p.values[i] - g.values[i]).powi(2)).sum();
            let mass: f64 = cells.iter().map(|&i| g.values[i]).sum();
            total += diff / (mass + 1.0);
        });
    }
    Ok(total / pred.len() as f64)
}

pub fn pooling_loss_grad(pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    check_batch(pred, gt)?;
    check_config(cfg)?;
    let k = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut grad = vec![0.0; p.values.len()];
            for_each_window(p.height, p.width, cfg, |cells| {
                let mass: f64 = cells.iter().map(|&i| g.values[i]).sum();
                let scale = 2.0 / ((mass + 1.0) * k);
                for &i in cells {
                    grad[i] += scale * (p.values[i] - g.values[i]);
                }
            });
            grad
        })
        .collect())
}

/// `α·L_E + L_P`.
pub fn total_loss(pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.alpha * euclidean_loss(pred, gt)? + pooling_loss(pred, gt, cfg)?)
}

pub fn total_loss_grad(pred: &[DensityMap], gt: &[DensityMap], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    let mut grad = pooling_loss_grad(pred, gt, cfg)?;
    for (g, e) in grad.iter_mut().zip(euclidean_loss_grad(pred, gt)?) {
        for (a, b) in g.iter_mut().zip(e) {
            *a += cfg.alpha * b;
        }
    }
    Ok(grad)
}

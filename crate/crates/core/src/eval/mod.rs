//! Counting metrics, region breakdowns, rankings, and heatmap exports.

mod metrics;
mod ranking;
mod report;
mod visualize;

pub use metrics::{compute_mae_mse, count_from_density, region_errors, RegionBands, RegionBreakdown, REGION_NAMES};
pub use ranking::{average_ranking, ranking_csv, MethodRanks};
pub use report::{evaluate, EvalOptions, EvalReport, Evaluation, ImageResult};
pub use visualize::{colormap, export_feature_channels, export_heatmap, HeatmapSidecar};

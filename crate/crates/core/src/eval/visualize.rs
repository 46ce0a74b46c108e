use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::nn::FeatureGrid;

/// Normalization recorded next to every exported heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub max: f64,
    /// `max == min`; every pixel then takes the colour of 0.
    pub degenerate: bool,
}

/// Jet-style colormap for `t` in `[0, 1]` (dark blue, cyan, yellow, dark red).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let channel = |center: f64| ((1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [channel(3.0), channel(2.0), channel(1.0)]
}

fn write_heatmap(values: &[f64], height: usize, width: usize, path: &Path) -> Result<HeatmapSidecar> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(max > min);
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, &v) in values.iter().enumerate() {
        let level = if degenerate { 0 } else { ((v - min) / (max - min) * 255.0).round() as u8 };
        img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(colormap(level as f64 / 255.0)));
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::export(path, e))?;
    let sidecar = HeatmapSidecar {
        height,
        width,
        min,
        max,
        degenerate,
    };
    let sidecar_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sidecar_path, text).map_err(|e| Error::export(&sidecar_path, e))?;
    Ok(sidecar)
}

/// Writes a color-mapped PNG (min→0, max→255 before the colormap) and a JSON
/// sidecar with the same stem.
pub fn export_heatmap(d: &DensityMap, path: &Path) -> Result<HeatmapSidecar> {
    if d.values.is_empty() {
        return Err(Error::export(path, "empty density map"));
    }
    write_heatmap(&d.values, d.height, d.width, path)
}

/// One heatmap per channel of a feature grid, named `{layer}-c{index:03}.png`,
/// each normalized independently.
pub fn export_feature_channels(grid: &FeatureGrid, layer: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::export(dir, e))?;
    (0..grid.channels)
        .map(|c| {
            let path = dir.join(format!("{layer}-c{c:03}.png"));
            write_heatmap(grid.channel(c), grid.height, grid.width, &path)?;
            Ok(path)
        })
        .collect()
}

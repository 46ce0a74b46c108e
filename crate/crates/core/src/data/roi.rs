//! Region-of-interest masks.

use serde::{Deserialize, Serialize};

use super::density::DensityMap;
use crate::error::{Error, Result};

/// Binary mask; `true` marks cells inside the region of interest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl RoiMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// Rasterizes polygons (vertices in pixel coordinates, `[x, y]`) with the
    /// even-odd rule, sampling each pixel at its integer coordinate.
    pub fn from_polygons(polygons: &[Vec<[f64; 2]>], height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            polygons.iter().any(|poly| point_in_polygon(x as f64, y as f64, poly))
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Max-pool by `factor`: an output cell is inside when any covered pixel is.
    /// Trailing partial blocks produce an extra row/column.
    pub fn downsample_max(&self, factor: usize) -> Self {
        let (oh, ow) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut out = Self::filled(oh, ow, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) {
                    out.data[(y / factor) * ow + x / factor] = true;
                }
            }
        }
        out
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Zeroes every density cell outside the ROI. A full-resolution mask is first
/// max-pooled down to the map's scale.
pub fn apply_roi_mask(map: &DensityMap, roi: &RoiMask) -> Result<DensityMap> {
    let scaled;
    let mask = if roi.height == map.height && roi.width == map.width {
        roi
    } else {
        scaled = roi.downsample_max(map.scale.max(1));
        &scaled
    };
    if mask.height != map.height || mask.width != map.width {
        return Err(Error::contract(format!(
            "roi {}x{} does not match {}x{} density map at scale {}",
            roi.height, roi.width, map.height, map.width, map.scale
        )));
    }
    let mut out = map.clone();
    for (v, &keep) in out.values.iter_mut().zip(&mask.data) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

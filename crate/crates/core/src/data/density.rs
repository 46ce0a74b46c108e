//! Ground-truth density maps: fixed-spread Gaussian rendering, count-preserving
//! block-sum downsampling and the raw-float export format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotations::HeadAnnotations;
use crate::error::{Error, Result};

/// Default Gaussian spread in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Kernel support half-width in units of sigma.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Non-negative per-cell person density; the map's sum is the crowd count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Downsampling factor relative to the source image.
    pub scale: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, scale: usize) -> Self {
        Self {
            height,
            width,
            scale,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, scale: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::contract(format!(
                "{height}x{width} density map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            scale,
            values,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Zero-pads on the bottom/right so both dims are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(h, w, self.scale);
        for y in 0..self.height {
            out.values[y * w..y * w + self.width].copy_from_slice(&self.values[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Renders one unit-mass Gaussian per head. The kernel is evaluated at pixel
/// indices within `TRUNCATE_SIGMAS · sigma` of the point (per axis), clipped to
/// the image, and renormalized after clipping so every head contributes
/// exactly one person.
pub fn generate_density_map(ann: &HeadAnnotations, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (ann.image_height(), ann.image_width());
    let mut map = DensityMap::zeros(h, w, 1);
    if h == 0 || w == 0 {
        return Ok(map);
    }
    let radius = TRUNCATE_SIGMAS * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut wx = Vec::new();
    let mut wy = Vec::new();
    for &(px, py) in ann.points() {
        let x0 = (px - radius).ceil().max(0.0) as usize;
        let x1 = ((px + radius).floor() as isize).min(w as isize - 1);
        let y0 = (py - radius).ceil().max(0.0) as usize;
        let y1 = ((py + radius).floor() as isize).min(h as isize - 1);
        if x1 < x0 as isize || y1 < y0 as isize {
            // Spread narrower than a pixel: all mass on the nearest cell.
            let cx = (px.round() as usize).min(w - 1);
            let cy = (py.round() as usize).min(h - 1);
            map.values[cy * w + cx] += 1.0;
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        // Separable kernel: weights per axis, normalized jointly.
        wx.clear();
        wx.extend((x0..=x1).map(|x| (-(x as f64 - px).powi(2) * inv).exp()));
        wy.clear();
        wy.extend((y0..=y1).map(|y| (-(y as f64 - py).powi(2) * inv).exp()));
        let total = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
        for (j, &ky) in wy.iter().enumerate() {
            let row = &mut map.values[(y0 + j) * w..(y0 + j + 1) * w];
            let ky = ky / total;
            for (i, &kx) in wx.iter().enumerate() {
                row[x0 + i] += ky * kx;
            }
        }
    }
    Ok(map)
}

/// Block-sum downsampling: each output cell is the sum of a `factor × factor`
/// block, so the total count is preserved.
pub fn downsample_density(d: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(Error::contract("downsampling factor must be positive"));
    }
    if d.height % factor != 0 || d.width % factor != 0 {
        return Err(Error::contract(format!(
            "{}x{} map is not divisible by {factor}; pad first",
            d.height, d.width
        )));
    }
    let (oh, ow) = (d.height / factor, d.width / factor);
    let mut out = DensityMap::zeros(oh, ow, d.scale * factor);
    for y in 0..d.height {
        let orow = &mut out.values[(y / factor) * ow..(y / factor + 1) * ow];
        for (x, &v) in d.values[y * d.width..(y + 1) * d.width].iter().enumerate() {
            orow[x / factor] += v;
        }
    }
    Ok(out)
}

/// Ground truth at the network's output resolution: render, pad, block-sum.
pub fn ground_truth_at_scale(ann: &HeadAnnotations, sigma: f64, factor: usize) -> Result<DensityMap> {
    let full = generate_density_map(ann, sigma)?;
    downsample_density(&full.pad_to_multiple(factor), factor)
}

/// JSON header accompanying a raw density export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub height: usize,
    pub width: usize,
    pub scale: usize,
    pub sum: f64,
}

/// Header path for a raw export: same stem, `.json` extension.
pub fn raw_header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes row-major little-endian `f32` values to `path` and the header next
/// to it. Values are narrowed to `f32`.
pub fn write_raw(d: &DensityMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(d.values.len() * 4);
    for &v in &d.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let header = RawHeader {
        height: d.height,
        width: d.width,
        scale: d.scale,
        sum: d.values.iter().map(|&v| v as f32 as f64).sum(),
    };
    fs::write(path, bytes).map_err(|e| Error::export(path, e))?;
    let header_path = raw_header_path(path);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::export(&header_path, e))?;
    fs::write(&header_path, text).map_err(|e| Error::export(&header_path, e))
}

pub fn read_raw(path: &Path) -> Result<DensityMap> {
    let header_path = raw_header_path(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::load(&header_path, e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::schema(&header_path, "<header>", e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    if bytes.len() != header.height * header.width * 4 {
        return Err(Error::load(
            path,
            format!("expected {} bytes for {}x{}, found {}", header.height * header.width * 4, header.height, header.width, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DensityMap::from_vec(header.height, header.width, header.scale, values)
}

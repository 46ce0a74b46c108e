//! RGB image <-> normalized 3-channel feature grid conversion.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::nn::FeatureGrid;

/// Per-channel normalization applied to every image fed to the network
/// (ImageNet statistics, matching VGG-16 backbone weights).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Normalize a grid of raw intensities in `[0, 1]` in place.
pub fn normalize_unit(grid: &mut FeatureGrid) {
    let n = grid.plane_len();
    for c in 0..3 {
        for v in &mut grid.data[c * n..(c + 1) * n] {
            *v = (*v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
}

pub fn from_rgb8(img: &RgbImage) -> FeatureGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut grid = FeatureGrid::zeros(3, h, w, 1);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = grid.idx(c, y as usize, x as usize);
            grid.data[i] = px[c] as f64 / 255.0;
        }
    }
    normalize_unit(&mut grid);
    grid
}

pub fn to_rgb8(grid: &FeatureGrid) -> RgbImage {
    let mut img = RgbImage::new(grid.width as u32, grid.height as u32);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let unit = grid.at(c, y, x) * CHANNEL_STD[c] + CHANNEL_MEAN[c];
                *p = (unit * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

pub fn load_image(path: &Path) -> Result<FeatureGrid> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_image(grid: &FeatureGrid, path: &Path) -> Result<()> {
    to_rgb8(grid)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::export(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_lossless() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([(x * 50) as u8, (y * 80) as u8, 255 - (x * y) as u8]));
        let grid = from_rgb8(&img);
        assert_eq!((grid.channels, grid.height, grid.width), (3, 3, 5));
        assert_eq!(to_rgb8(&grid), img);
    }
}

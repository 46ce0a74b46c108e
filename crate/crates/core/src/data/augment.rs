//! Training-time augmentation: random crops, rescaling and mirroring.
//!
//! Random draws happen in a fixed order so a run can be replayed from its
//! seed: per augmented sample, the scale index (only when more than one scale
//! is configured), then the crop origin (top row first, then left column),
//! then the mirror coin flip (only when mirroring is enabled).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{CrowdSample, HeadAnnotations};
use super::roi::RoiMask;
use crate::error::{Error, Result};
use crate::nn::pool::resize_bilinear;
use crate::nn::FeatureGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    pub scales: Vec<f64>,
    pub mirror: bool,
    /// Images whose longer side exceeds this are shrunk to it on load.
    pub longest_side_cap: Option<usize>,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_size: 224,
            scales: vec![0.75, 1.0, 1.25],
            mirror: true,
            longest_side_cap: None,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Profile for very large images: 512 crops, longer side capped at 2048.
    pub fn large_image() -> Self {
        Self {
            crop_size: 512,
            longest_side_cap: Some(2048),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.crop_size == 0 {
            problems.push("augmentation.crop_size must be > 0".to_owned());
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            problems.push("augmentation.scales must all be > 0".to_owned());
        }
        if self.longest_side_cap == Some(0) {
            problems.push("augmentation.longest_side_cap must be > 0".to_owned());
        }
        problems
    }
}

/// Resizes to an explicit size; points are mapped with the per-axis ratio.
pub fn resize_sample(s: &CrowdSample, height: usize, width: usize) -> CrowdSample {
    let fx = width as f64 / s.width() as f64;
    let fy = height as f64 / s.height() as f64;
    resize_with(s, height, width, fx, fy)
}

fn resize_with(s: &CrowdSample, height: usize, width: usize, fx: f64, fy: f64) -> CrowdSample {
    let image = resize_bilinear(&s.image, height, width, 1);
    let points = s.annotations.points().iter().map(|&(x, y)| (x * fx, y * fy)).collect();
    let (annotations, _) = HeadAnnotations::clamped(points, width, height);
    let roi = s.roi.as_ref().map(|r| resize_mask(r, height, width));
    CrowdSample {
        id: s.id.clone(),
        image,
        annotations,
        roi,
    }
}

fn resize_mask(r: &RoiMask, height: usize, width: usize) -> RoiMask {
    RoiMask::from_fn(height, width, |y, x| {
        let sy = ((y as f64 + 0.5) * r.height as f64 / height as f64) as usize;
        let sx = ((x as f64 + 0.5) * r.width as f64 / width as f64) as usize;
        r.at(sy.min(r.height - 1), sx.min(r.width - 1))
    })
}

/// Bilinear rescale by `factor`; point coordinates are multiplied by `factor`.
pub fn scale_sample(s: &CrowdSample, factor: f64) -> Result<CrowdSample> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::contract(format!("scale factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(s.clone());
    }
    let h = ((s.height() as f64 * factor).round() as usize).max(1);
    let w = ((s.width() as f64 * factor).round() as usize).max(1);
    Ok(resize_with(s, h, w, factor, factor))
}

/// Shrinks the sample so its longer side is at most `cap`, keeping aspect ratio.
pub fn cap_longest_side(s: &CrowdSample, cap: usize) -> Result<CrowdSample> {
    let longest = s.height().max(s.width());
    if longest <= cap {
        return Ok(s.clone());
    }
    scale_sample(s, cap as f64 / longest as f64)
}

/// Flips columns; a point at `x` moves to `width - 1 - x`.
pub fn horizontal_mirror(s: &CrowdSample) -> CrowdSample {
    let mut image = s.image.clone();
    for row in image.data.chunks_mut(s.width()) {
        row.reverse();
    }
    let w = s.width() as f64;
    let points = s.annotations.points().iter().map(|&(x, y)| (w - 1.0 - x, y)).collect();
    // Points in (w-1, w) land in (-1, 0); the clamp keeps the frame invariant.
    let (annotations, _) = HeadAnnotations::clamped(points, s.width(), s.height());
    CrowdSample {
        id: s.id.clone(),
        image,
        annotations,
        roi: s.roi.as_ref().map(RoiMask::mirrored),
    }
}

/// Upscales (preserving aspect ratio) so both sides are at least `crop`.
pub fn ensure_min_size(s: &CrowdSample, crop: usize) -> CrowdSample {
    if s.height() >= crop && s.width() >= crop {
        return s.clone();
    }
    let f = crop as f64 / s.height().min(s.width()) as f64;
    let h = ((s.height() as f64 * f).round() as usize).max(crop);
    let w = ((s.width() as f64 * f).round() as usize).max(crop);
    resize_sample(s, h, w)
}

/// Cuts the `crop × crop` window at (`top`, `left`); points outside are dropped.
pub fn crop_at(s: &CrowdSample, top: usize, left: usize, crop: usize) -> Result<CrowdSample> {
    if top + crop > s.height() || left + crop > s.width() {
        return Err(Error::contract(format!(
            "crop {crop} at ({top}, {left}) exceeds {}x{} image",
            s.height(),
            s.width()
        )));
    }
    let mut image = FeatureGrid::zeros(3, crop, crop, 1);
    for c in 0..3 {
        for y in 0..crop {
            let src = s.image.idx(c, top + y, left);
            let dst = image.idx(c, y, 0);
            image.data[dst..dst + crop].copy_from_slice(&s.image.data[src..src + crop]);
        }
    }
    let (t, l, e) = (top as f64, left as f64, crop as f64);
    let points: Vec<(f64, f64)> = s
        .annotations
        .points()
        .iter()
        .filter(|&&(x, y)| x >= l && x < l + e && y >= t && y < t + e)
        .map(|&(x, y)| (x - l, y - t))
        .collect();
    let roi = s.roi.as_ref().map(|r| RoiMask::from_fn(crop, crop, |y, x| r.at(top + y, left + x)));
    Ok(CrowdSample {
        id: s.id.clone(),
        image,
        annotations: HeadAnnotations::new(points, crop, crop)?,
        roi,
    })
}

/// Random `crop × crop` window drawn from `rng` (top, then left).
pub fn random_crop_with<R: Rng>(s: &CrowdSample, crop: usize, rng: &mut R) -> CrowdSample {
    let s = ensure_min_size(s, crop);
    let top = rng.random_range(0..=s.height() - crop);
    let left = rng.random_range(0..=s.width() - crop);
    crop_at(&s, top, left, crop).expect("crop origin drawn inside image")
}

/// Random crop seeded from `cfg.rng_seed`.
pub fn random_crop(s: &CrowdSample, cfg: &AugmentationConfig) -> CrowdSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    random_crop_with(s, cfg.crop_size, &mut rng)
}

/// Full per-crop augmentation: optional rescale, random crop, optional mirror.
pub fn augment<R: Rng>(s: &CrowdSample, cfg: &AugmentationConfig, rng: &mut R) -> Result<CrowdSample> {
    let scaled = match cfg.scales.len() {
        0 => s.clone(),
        1 => scale_sample(s, cfg.scales[0])?,
        n => scale_sample(s, cfg.scales[rng.random_range(0..n)])?,
    };
    let cropped = random_crop_with(&scaled, cfg.crop_size, rng);
    if cfg.mirror && rng.random_bool(0.5) {
        Ok(horizontal_mirror(&cropped))
    } else {
        Ok(cropped)
    }
}

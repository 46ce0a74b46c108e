//! Procedural crowd scenes for dataset-free testing.
//!
//! Heads are soft dark blobs over a smoothly textured background. With the
//! `Perspective` profile the head row is drawn from a density that falls
//! linearly from the top edge to zero at the bottom (`y = h·(1 − √u)`), so the
//! top third receives 5/9 of the heads and the bottom third 1/9; blob radius
//! grows with `y` to mimic distance from the camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{CrowdSample, HeadAnnotations};
use super::image::normalize_unit;
use crate::error::Result;
use crate::nn::FeatureGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityProfile {
    Uniform,
    Perspective,
}

impl std::str::FromStr for DensityProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "perspective" => Ok(Self::Perspective),
            other => Err(format!("unknown density profile `{other}` (expected uniform|perspective)")),
        }
    }
}

const UNIFORM_RADIUS: f64 = 3.0;
const FAR_RADIUS: f64 = 1.5;
const NEAR_RADIUS: f64 = 5.0;

/// Band (0 = top third, 1 = middle, 2 = bottom) of a row coordinate.
pub fn band_of(y: f64, height: usize) -> usize {
    ((3.0 * y / height as f64) as usize).min(2)
}

/// Head counts per horizontal third (top, middle, bottom).
pub fn band_counts(ann: &HeadAnnotations) -> [usize; 3] {
    let mut counts = [0; 3];
    for &(_, y) in ann.points() {
        counts[band_of(y, ann.image_height())] += 1;
    }
    counts
}

pub fn synthesize_scene(seed: u64, count: usize, size: (usize, usize), profile: DensityProfile) -> Result<CrowdSample> {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = FeatureGrid::zeros(3, h, w, 1);

    // Background: base tint plus two random low-frequency waves and pixel noise.
    let base: [f64; 3] = [rng.random_range(0.45..0.65), rng.random_range(0.5..0.7), rng.random_range(0.4..0.6)];
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| (rng.random_range(0.01..0.06), rng.random_range(0.01..0.06), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin()).sum::<f64>() * 0.05;
            let noise = rng.random_range(-0.03..0.03);
            for (c, b) in base.iter().enumerate() {
                let i = image.idx(c, y, x);
                image.data[i] = b + tex + noise;
            }
        }
    }

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random_range(0.0..w as f64);
        let y = match profile {
            DensityProfile::Uniform => rng.random_range(0.0..h as f64),
            DensityProfile::Perspective => {
                let u: f64 = rng.random_range(0.0..1.0);
                (h as f64 * (1.0 - u.sqrt())).min(h as f64 - 1e-9)
            }
        };
        let shade = rng.random_range(0.05..0.2);
        let radius = match profile {
            DensityProfile::Uniform => UNIFORM_RADIUS,
            DensityProfile::Perspective => FAR_RADIUS + (NEAR_RADIUS - FAR_RADIUS) * y / h as f64,
        };
        draw_blob(&mut image, x, y, radius, shade);
        points.push((x, y));
    }

    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }
    normalize_unit(&mut image);
    let annotations = HeadAnnotations::new(points, w, h)?;
    CrowdSample::new(format!("scene-{seed:016x}"), image, annotations, None)
}

fn draw_blob(image: &mut FeatureGrid, cx: f64, cy: f64, radius: f64, shade: f64) {
    let s = radius / 1.5;
    let reach = 3.0 * s;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(image.height.saturating_sub(1));
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(image.width.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let alpha = (-d2 / (2.0 * s * s)).exp();
            for c in 0..3 {
                let i = image.idx(c, y, x);
                image.data[i] = image.data[i] * (1.0 - alpha) + shade * alpha;
            }
        }
    }
}

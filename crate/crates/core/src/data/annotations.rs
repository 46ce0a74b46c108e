//! Head annotations, crowd samples and the JSON annotation sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::image::load_image;
use super::roi::RoiMask;
use crate::error::{Error, Result};
use crate::nn::FeatureGrid;

/// Head-centre points of one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAnnotations {
    points: Vec<(f64, f64)>,
    image_width: usize,
    image_height: usize,
}

impl HeadAnnotations {
    /// Every point must satisfy `0 <= x < width` and `0 <= y < height`.
    pub fn new(points: Vec<(f64, f64)>, image_width: usize, image_height: usize) -> Result<Self> {
        for (i, &(x, y)) in points.iter().enumerate() {
            if !(x >= 0.0 && x < image_width as f64 && y >= 0.0 && y < image_height as f64) {
                return Err(Error::contract(format!(
                    "point {i} ({x}, {y}) outside {image_width}x{image_height} image"
                )));
            }
        }
        Ok(Self {
            points,
            image_width,
            image_height,
        })
    }

    /// Clamps out-of-bounds points onto the image border and reports how many
    /// were moved.
    pub fn clamped(points: Vec<(f64, f64)>, image_width: usize, image_height: usize) -> (Self, usize) {
        let max_x = image_width.saturating_sub(1) as f64;
        let max_y = image_height.saturating_sub(1) as f64;
        let mut moved = 0;
        let points = points
            .into_iter()
            .map(|(x, y)| {
                let inside = x >= 0.0 && x < image_width as f64 && y >= 0.0 && y < image_height as f64;
                if inside {
                    (x, y)
                } else {
                    moved += 1;
                    (clamp_finite(x, max_x), clamp_finite(y, max_y))
                }
            })
            .collect();
        (
            Self {
                points,
                image_width,
                image_height,
            },
            moved,
        )
    }

    pub fn empty(image_width: usize, image_height: usize) -> Self {
        Self {
            points: Vec::new(),
            image_width,
            image_height,
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }
}

fn clamp_finite(v: f64, max: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, max)
    }
}

/// One training/evaluation example: normalized RGB image, annotations and an
/// optional region-of-interest mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdSample {
    pub id: String,
    /// `3 × H × W`, normalized with [`CHANNEL_MEAN`](super::image::CHANNEL_MEAN)/[`CHANNEL_STD`](super::image::CHANNEL_STD).
    pub image: FeatureGrid,
    pub annotations: HeadAnnotations,
    pub roi: Option<RoiMask>,
}

impl CrowdSample {
    pub fn new(id: impl Into<String>, image: FeatureGrid, annotations: HeadAnnotations, roi: Option<RoiMask>) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::contract(format!("image has {} channels, expected 3", image.channels)));
        }
        if annotations.image_width != image.width || annotations.image_height != image.height {
            return Err(Error::contract("annotation frame does not match image size"));
        }
        if let Some(roi) = &roi {
            if roi.height != image.height || roi.width != image.width {
                return Err(Error::contract(format!(
                    "roi {}x{} does not match image {}x{}",
                    roi.height, roi.width, image.height, image.width
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            annotations,
            roi,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn count(&self) -> usize {
        self.annotations.count()
    }
}

/// On-disk annotation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Image path relative to the sidecar's directory.
    pub image: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_polygons: Option<Vec<Vec<[f64; 2]>>>,
}

impl Sidecar {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::schema(path, "<document>", e.to_string()))?;
        let obj = doc.as_object().ok_or_else(|| Error::schema(path, "<document>", "expected a JSON object"))?;
        let image = obj
            .get("image")
            .ok_or_else(|| Error::schema(path, "image", "missing"))?
            .as_str()
            .ok_or_else(|| Error::schema(path, "image", "expected a string"))?
            .to_owned();
        let points = obj
            .get("points")
            .ok_or_else(|| Error::schema(path, "points", "missing"))?
            .as_array()
            .ok_or_else(|| Error::schema(path, "points", "expected an array"))?
            .iter()
            .enumerate()
            .map(|(i, p)| parse_pair(path, &format!("points[{i}]"), p))
            .collect::<Result<Vec<_>>>()?;
        let roi_polygons = match obj.get("roi_polygons") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let polys = v.as_array().ok_or_else(|| Error::schema(path, "roi_polygons", "expected an array of polygons"))?;
                Some(
                    polys
                        .iter()
                        .enumerate()
                        .map(|(i, poly)| {
                            let field = format!("roi_polygons[{i}]");
                            let verts = poly.as_array().ok_or_else(|| Error::schema(path, &field, "expected an array of vertices"))?;
                            if verts.len() < 3 {
                                return Err(Error::schema(path, &field, "polygon needs at least 3 vertices"));
                            }
                            verts
                                .iter()
                                .enumerate()
                                .map(|(j, p)| parse_pair(path, &format!("{field}[{j}]"), p))
                                .collect()
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(Self {
            image,
            points,
            roi_polygons,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::parse(path, &text)
    }

    pub fn image_path(&self, sidecar_path: &Path) -> PathBuf {
        sidecar_path.parent().unwrap_or_else(|| Path::new(".")).join(&self.image)
    }
}

fn parse_pair(path: &Path, field: &str, v: &Value) -> Result<[f64; 2]> {
    let arr = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::schema(path, field, "expected [x, y]"))?;
    let mut out = [0.0; 2];
    for (o, e) in out.iter_mut().zip(arr) {
        *o = e.as_f64().filter(|f| f.is_finite()).ok_or_else(|| Error::schema(path, field, "coordinates must be finite numbers"))?;
    }
    Ok(out)
}

/// A sample read from disk along with the number of annotation points that
/// had to be clamped into the image.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub sample: CrowdSample,
    pub clamped_points: usize,
}

/// Reads an annotation sidecar and the image it references. The sample id is
/// the sidecar's file stem.
pub fn load_annotations(sidecar_path: &Path) -> Result<LoadedSample> {
    let sidecar = Sidecar::read(sidecar_path)?;
    let image = load_image(&sidecar.image_path(sidecar_path))?;
    let (annotations, clamped_points) = HeadAnnotations::clamped(
        sidecar.points.iter().map(|p| (p[0], p[1])).collect(),
        image.width,
        image.height,
    );
    let roi = sidecar
        .roi_polygons
        .as_ref()
        .map(|polys| RoiMask::from_polygons(polys, image.height, image.width));
    let id = sidecar_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadedSample {
        sample: CrowdSample::new(id, image, annotations, roi)?,
        clamped_points,
    })
}

//! Pointwise activation, 2×2 pooling and bilinear resampling.

use super::grid::FeatureGrid;
use crate::error::{Error, Result};

pub fn relu(x: &FeatureGrid) -> FeatureGrid {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward(y: &FeatureGrid, dy: &FeatureGrid) -> FeatureGrid {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

fn check_even(x: &FeatureGrid, what: &str) -> Result<()> {
    if x.height % 2 != 0 || x.width % 2 != 0 {
        return Err(Error::contract(format!(
            "{what} needs even spatial dims, got {}x{}",
            x.height, x.width
        )));
    }
    Ok(())
}

/// 2×2 max-pool, stride 2. Returns the pooled grid and, per output cell, the
/// flat index of the winning input cell (first maximum in row-major order).
pub fn max_pool2(x: &FeatureGrid) -> Result<(FeatureGrid, Vec<u32>)> {
    check_even(x, "max-pool")?;
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut y = FeatureGrid::zeros(x.channels, oh, ow, x.stride * 2);
    let mut arg = vec![0u32; y.data.len()];
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x.idx(c, 2 * oy, 2 * ox);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = x.idx(c, 2 * oy + dy, 2 * ox + dx);
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = y.idx(c, oy, ox);
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward(input_like: &FeatureGrid, argmax: &[u32], dy: &FeatureGrid) -> FeatureGrid {
    let mut dx = input_like.zeros_like();
    for (&i, &g) in argmax.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

pub fn avg_pool2(x: &FeatureGrid) -> Result<FeatureGrid> {
    check_even(x, "average pool")?;
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut y = FeatureGrid::zeros(x.channels, oh, ow, x.stride * 2);
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let s = x.at(c, 2 * oy, 2 * ox)
                    + x.at(c, 2 * oy, 2 * ox + 1)
                    + x.at(c, 2 * oy + 1, 2 * ox)
                    + x.at(c, 2 * oy + 1, 2 * ox + 1);
                let o = y.idx(c, oy, ox);
                y.data[o] = 0.25 * s;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward(input_like: &FeatureGrid, dy: &FeatureGrid) -> FeatureGrid {
    let mut dx = input_like.zeros_like();
    for c in 0..dy.channels {
        for oy in 0..dy.height {
            for ox in 0..dy.width {
                let g = 0.25 * dy.at(c, oy, ox);
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = dx.idx(c, 2 * oy + a, 2 * ox + b);
                    dx.data[i] += g;
                }
            }
        }
    }
    dx
}

/// One axis of a half-pixel-centred bilinear resample: for each output index,
/// the two source taps and the weight of the second.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `height × width`; `stride` is the
/// stride label of the result. Same-size resizes are exact copies.
pub fn resize_bilinear(x: &FeatureGrid, height: usize, width: usize, stride: usize) -> FeatureGrid {
    if x.height == height && x.width == width {
        let mut y = x.clone();
        y.stride = stride;
        return y;
    }
    let ty = bilinear_taps(x.height, height);
    let tx = bilinear_taps(x.width, width);
    let mut y = FeatureGrid::zeros(x.channels, height, width, stride);
    for c in 0..x.channels {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                let o = y.idx(c, oy, ox);
                y.data[o] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(input_like: &FeatureGrid, dy: &FeatureGrid) -> FeatureGrid {
    if input_like.height == dy.height && input_like.width == dy.width {
        let mut dx = dy.clone();
        dx.stride = input_like.stride;
        return dx;
    }
    let ty = bilinear_taps(input_like.height, dy.height);
    let tx = bilinear_taps(input_like.width, dy.width);
    let mut dx = input_like.zeros_like();
    for c in 0..dy.channels {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy.at(c, oy, ox);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let i = dx.idx(c, yy, xx);
                        dx.data[i] += g * wy * wx;
                    }
                }
            }
        }
    }
    dx
}

//! 2D convolution and transposed convolution via im2col + GEMM.

use std::cell::RefCell;

use super::gemm::{gemm, Operand};
use super::grid::FeatureGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// "Same" 3×3 convolution.
    pub const fn same3() -> Self {
        Self::new(3, 1, 1)
    }

    pub const fn pointwise(stride: usize) -> Self {
        Self::new(1, stride, 0)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::contract(format!(
                "{h}x{w} input too small for kernel {}",
                self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    pub fn transposed_output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.padding,
            (w - 1) * self.stride + self.kernel - 2 * self.padding,
        )
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable buffer of `len` values whose contents are unspecified.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    out
}

/// Valid output range `lo..hi` of a stride-1 row whose input offset is `off`.
fn stride1_span(off: isize, w: usize, ow: usize) -> (usize, usize) {
    let lo = ((-off).max(0) as usize).min(ow);
    let hi = (w as isize - off).clamp(lo as isize, ow as isize) as usize;
    (lo, hi)
}

/// Unfold `src` (`c × h × w`) into the `(c·k·k) × (oh·ow)` patch matrix
/// `cols`. Every entry of `cols` is written.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(src: &[f64], c: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = spec.kernel;
    let n = oh * ow;
    debug_assert_eq!(cols.len(), c * k * k * n);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if spec.stride == 1 {
                        let off = kx as isize - spec.padding as isize;
                        let (lo, hi) = stride1_span(off, w, ow);
                        dst_row[..lo].fill(0.0);
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                        dst_row[hi..].fill(0.0);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            *d = if ix >= 0 && ix < w as isize { src_row[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `dst`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize, dst: &mut [f64]) {
    let k = spec.kernel;
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if spec.stride == 1 {
                        let off = kx as isize - spec.padding as isize;
                        let (lo, hi) = stride1_span(off, w, ow);
                        if lo < hi {
                            let d0 = (lo as isize + off) as usize;
                            for (d, s) in dst_row[d0..d0 + (hi - lo)].iter_mut().zip(&src_row[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weight(weight: &[f64], expected: usize, what: &str) -> Result<()> {
    if weight.len() != expected {
        return Err(Error::contract(format!(
            "{what} weight has {} values, expected {expected}",
            weight.len()
        )));
    }
    Ok(())
}

/// Cross-correlation with weights laid out `[out, in, k, k]`.
pub fn conv2d(x: &FeatureGrid, weight: &[f64], bias: Option<&[f64]>, out_channels: usize, spec: ConvSpec) -> Result<FeatureGrid> {
    let kk = x.channels * spec.kernel * spec.kernel;
    check_weight(weight, out_channels * kk, "conv")?;
    let (oh, ow) = spec.output_size(x.height, x.width)?;
    let n = oh * ow;
    let mut out = FeatureGrid::zeros(out_channels, oh, ow, x.stride * spec.stride);
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out.data[co * n..(co + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if spec.is_identity_gather() {
        gemm(out_channels, kk, n, Operand::n(weight, kk), Operand::n(&x.data, n), beta, &mut out.data);
    } else {
        with_scratch(kk * n, |cols| {
            im2col(&x.data, x.channels, x.height, x.width, spec, oh, ow, cols);
            gemm(out_channels, kk, n, Operand::n(weight, kk), Operand::n(cols, n), beta, &mut out.data);
        });
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Weight/bias gradients are accumulated into `dw`/`db`;
/// the input gradient is returned only when `need_dx` is set.
pub fn conv2d_backward(
    x: &FeatureGrid,
    weight: &[f64],
    spec: ConvSpec,
    dy: &FeatureGrid,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<FeatureGrid> {
    let co = dy.channels;
    let kk = x.channels * spec.kernel * spec.kernel;
    let n = dy.plane_len();
    if let Some(db) = db {
        for (c, g) in db.iter_mut().enumerate() {
            *g += dy.channel(c).iter().sum::<f64>();
        }
    }
    if spec.is_identity_gather() {
        gemm(co, n, kk, Operand::n(&dy.data, n), Operand::t(&x.data, n), 1.0, dw);
    } else {
        with_scratch(kk * n, |cols| {
            im2col(&x.data, x.channels, x.height, x.width, spec, dy.height, dy.width, cols);
            gemm(co, n, kk, Operand::n(&dy.data, n), Operand::t(cols, n), 1.0, dw);
        });
    }
    if !need_dx {
        return None;
    }
    let mut dx = x.zeros_like();
    if spec.is_identity_gather() {
        gemm(kk, co, n, Operand::t(weight, kk), Operand::n(&dy.data, n), 0.0, &mut dx.data);
    } else {
        with_scratch(kk * n, |dcols| {
            gemm(kk, co, n, Operand::t(weight, kk), Operand::n(&dy.data, n), 0.0, dcols);
            col2im(dcols, x.channels, x.height, x.width, spec, dy.height, dy.width, &mut dx.data);
        });
    }
    Some(dx)
}

/// Transposed convolution with weights laid out `[in, out, k, k]`.
pub fn conv_transpose2d(x: &FeatureGrid, weight: &[f64], bias: Option<&[f64]>, out_channels: usize, spec: ConvSpec) -> Result<FeatureGrid> {
    let okk = out_channels * spec.kernel * spec.kernel;
    check_weight(weight, x.channels * okk, "transposed conv")?;
    if x.stride % spec.stride != 0 {
        return Err(Error::contract(format!(
            "cannot upsample stride-{} features by {}",
            x.stride, spec.stride
        )));
    }
    let (oh, ow) = spec.transposed_output_size(x.height, x.width);
    let n = x.plane_len();
    let mut out = FeatureGrid::zeros(out_channels, oh, ow, x.stride / spec.stride);
    if let Some(b) = bias {
        let plane = oh * ow;
        for (co, &bv) in b.iter().enumerate() {
            out.data[co * plane..(co + 1) * plane].fill(bv);
        }
    }
    with_scratch(okk * n, |cols| {
        gemm(okk, x.channels, n, Operand::t(weight, okk), Operand::n(&x.data, n), 0.0, cols);
        col2im(cols, out_channels, oh, ow, spec, x.height, x.width, &mut out.data);
    });
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &FeatureGrid,
    weight: &[f64],
    spec: ConvSpec,
    dy: &FeatureGrid,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<FeatureGrid> {
    let okk = dy.channels * spec.kernel * spec.kernel;
    let n = x.plane_len();
    if let Some(db) = db {
        for (c, g) in db.iter_mut().enumerate() {
            *g += dy.channel(c).iter().sum::<f64>();
        }
    }
    with_scratch(okk * n, |cols| {
        im2col(&dy.data, dy.channels, dy.height, dy.width, spec, x.height, x.width, cols);
        gemm(x.channels, n, okk, Operand::n(&x.data, n), Operand::t(cols, n), 1.0, dw);
        if !need_dx {
            return None;
        }
        let mut dx = x.zeros_like();
        gemm(x.channels, okk, n, Operand::n(weight, okk), Operand::n(cols, n), 0.0, &mut dx.data);
        Some(dx)
    })
}

use crate::error::{Error, Result};

/// Channel-major feature tensor (`channels × height × width`) with the spatial
/// reduction factor it sits at relative to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "feature grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width, self.stride)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

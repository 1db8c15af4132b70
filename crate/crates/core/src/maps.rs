//! Dense per-pixel containers: generic tensors, feature maps, binary masks
//! and label images.

use crate::error::{Error, Result};

/// Row-major `f32` tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for (slot, &d) in idx.iter_mut().zip(&self.dims).rev() {
            *slot = flat % d.max(1);
            flat /= d.max(1);
        }
        idx
    }
}

/// `H × W × D` feature image for one view, row-major with the feature
/// vector innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        FeatureMap {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    /// Every texel holds `value`.
    pub fn constant(height: usize, width: usize, value: &[f32]) -> Self {
        let dim = value.len();
        let mut data = Vec::with_capacity(height * width * dim);
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        FeatureMap {
            height,
            width,
            dim,
            data,
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.dims.len() != 3 {
            return Err(Error::Dimension(format!(
                "feature map needs rank 3 (H, W, D), got dims {:?}",
                t.dims
            )));
        }
        Ok(FeatureMap {
            height: t.dims[0],
            width: t.dims[1],
            dim: t.dims[2],
            data: t.data,
        })
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.dim],
            data: self.data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }
}

/// Binary `H × W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
}

/// Per-pixel class labels; `-1` is unlabeled / background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i32>,
}

impl LabelImage {
    pub fn filled(width: usize, height: usize, label: i32) -> Self {
        LabelImage {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.data[y * self.width + x]
    }

    /// Pixels carrying `label`.
    pub fn mask_of(&self, label: i32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }
}

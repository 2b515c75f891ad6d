//! Differentiable kernels for the fixed conv → batch-norm → leaky-ReLU
//! stack: valid 3D cross-correlation, batch normalization and leaky
//! rectification, each with a hand-derived backward pass.
//!
//! Tensors are logically shaped `(N, C, D, H, W)` but stored channels-last
//! (`N, D, H, W, C`), so that a run of voxels along `x` is a contiguous
//! `(W × C)` matrix for the convolution's inner products.

mod activation;
mod batchnorm;
mod conv;
pub(crate) mod gemm;

pub use activation::{leaky_relu, leaky_relu_backward, leaky_relu_backward_in_place, leaky_relu_in_place};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormParams};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvLayerParams};

use crate::error::{bail, Result};

/// Dense 5D tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: [usize; 5]) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "tensor dims must be >= 1, got {shape:?}");
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    /// Build from channels-last data (`N, D, H, W, C` order).
    pub fn from_channels_last(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "tensor dims must be >= 1, got {shape:?}");
        }
        if data.len() != shape.iter().product::<usize>() {
            bail!(Shape, "tensor {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len());
        }
        Ok(Self { shape, data })
    }

    /// Single-sample, single-channel tensor from a `(D, H, W)` scalar field.
    pub fn from_volume(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::from_channels_last([1, 1, dims[0], dims[1], dims[2]], data)
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, d, h, w] = shape;
        for ni in 0..n {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..c {
                            let i = t.index(ni, ci, z, y, x);
                            t.data[i] = f([ni, ci, z, y, x]);
                        }
                    }
                }
            }
        }
        t
    }

    /// `(N, C, D, H, W)`.
    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn positions(&self) -> usize {
        self.shape[0] * self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, cs, _, h, w] = self.shape;
        (((n * self.shape[2] + z) * h + y) * w + x) * cs + c
    }

    pub fn get(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, z, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, z, y, x);
        self.data[i] = v;
    }

    /// Channels-last storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the spatial dims; batch and channel counts must match.
    pub fn reshape(self, shape: [usize; 5]) -> Result<Self> {
        if shape[0] != self.shape[0] || shape[1] != self.shape[1] || shape.iter().product::<usize>() != self.data.len() {
            bail!(Shape, "cannot reshape {:?} to {shape:?}", self.shape);
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy the sub-box starting at `origin` (z, y, x) with spatial `size`,
    /// all samples and channels.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let [n, c, d, h, w] = self.shape;
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > [d, h, w][a] {
                bail!(Shape, "crop {origin:?}+{size:?} outside tensor spatial dims {:?}", [d, h, w]);
            }
        }
        let mut out = Self::zeros([n, c, size[0], size[1], size[2]]);
        let row = size[2] * c;
        let mut dst = 0;
        for ni in 0..n {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let src = self.index(ni, 0, origin[0] + z, origin[1] + y, origin[2]);
                    out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
                    dst += row;
                }
            }
        }
        Ok(out)
    }
}

/// Receptive field of `m` stacked kernel-3 valid convolutions.
pub fn receptive_field(m: usize) -> Result<usize> {
    if m < 1 {
        bail!(InvalidArgument, "layer count must be at least 1");
    }
    Ok(3 + 2 * (m - 1))
}

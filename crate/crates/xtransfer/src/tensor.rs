//! Dense feature tensors in channels-height-width layout.
//!
//! Everything downstream (layer forwards, MMC statistics, gradients) operates
//! on [`FeatureBatch`], a contiguous `n x (c*h*w)` block of `f64`. Weights are
//! stored as `f64` in memory but are always quantized through `f32` at
//! serialization boundaries, so round-trips are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a single sample: channels x height x width.
///
/// 1D data is represented with `height == 1` (e.g. a 6-channel window of 128
/// timesteps is `6x1x128`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels >= 1 && height >= 1 && width >= 1, "dimensions must be >= 1");
        Self { channels, height, width }
    }

    /// Elements per sample.
    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Spatial positions per channel.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A batch of samples sharing one shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    shape: TensorShape,
    len: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        let per = shape.elements();
        if per == 0 || data.len() % per != 0 {
            return Err(Error::Shape {
                expected: format!("multiple of {per} values for shape {shape}"),
                got: format!("{} values", data.len()),
            });
        }
        let len = data.len() / per;
        Ok(Self { shape, len, data })
    }

    pub fn zeros(shape: TensorShape, len: usize) -> Self {
        Self { shape, len, data: vec![0.0; shape.elements() * len] }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.shape.elements();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let per = self.shape.elements();
        &mut self.data[i * per..(i + 1) * per]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_samples(&self) -> impl Iterator<Item = &[f64]> {
        let per = self.shape.elements();
        self.data.chunks_exact(per)
    }

    /// Checks that `self` matches `expected` per sample, for layer contracts.
    pub fn expect_shape(&self, expected: TensorShape) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::Shape { expected: expected.to_string(), got: self.shape.to_string() })
        }
    }
}

/// Index of a value within `(channel, y, x)` for a given shape.
#[inline]
pub fn at(shape: TensorShape, c: usize, y: usize, x: usize) -> usize {
    (c * shape.height + y) * shape.width + x
}

/// Quantizes a slice of weights through `f32`, in place.
///
/// Serialized blobs are little-endian `f32`; running models on the quantized
/// values guarantees that evaluate-after-reload reproduces in-memory metrics
/// exactly.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}

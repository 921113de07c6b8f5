//! Non-overlapping average pooling.

use crate::error::{Error, Result};
use crate::tensor::{at, FeatureBatch, TensorShape};

/// Average pooling with stride equal to the kernel; trailing rows/columns
/// that do not fill a window are dropped (floor division).
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2d {
    pub kh: usize,
    pub kw: usize,
}

impl AvgPool2d {
    /// Square kernel clamped to the input extent, so height-1 inputs pool
    /// along width only.
    pub fn clamped(k: usize, input: TensorShape) -> Self {
        Self { kh: k.min(input.height).max(1), kw: k.min(input.width).max(1) }
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        if input.height < self.kh || input.width < self.kw {
            return Err(Error::Shape {
                expected: format!("spatial >= {}x{}", self.kh, self.kw),
                got: input.to_string(),
            });
        }
        Ok(TensorShape::new(input.channels, input.height / self.kh, input.width / self.kw))
    }

    pub fn forward(&self, input: &FeatureBatch) -> Result<FeatureBatch> {
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape)?;
        let window = (self.kh * self.kw) as f64;
        let mut out = FeatureBatch::zeros(out_shape, input.len());
        for s in 0..input.len() {
            let x = input.sample(s);
            let y = out.sample_mut(s);
            for c in 0..out_shape.channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let mut acc = 0.0;
                        for dy in 0..self.kh {
                            for dx in 0..self.kw {
                                acc += x[at(in_shape, c, oy * self.kh + dy, ox * self.kw + dx)];
                            }
                        }
                        y[at(out_shape, c, oy, ox)] = acc / window;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input_shape: TensorShape, grad_out: &FeatureBatch) -> Result<FeatureBatch> {
        let out_shape = self.output_shape(input_shape)?;
        grad_out.expect_shape(out_shape)?;
        let window = (self.kh * self.kw) as f64;
        let mut grad_in = FeatureBatch::zeros(input_shape, grad_out.len());
        for s in 0..grad_out.len() {
            let go = grad_out.sample(s);
            let gi = grad_in.sample_mut(s);
            for c in 0..out_shape.channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let g = go[at(out_shape, c, oy, ox)] / window;
                        for dy in 0..self.kh {
                            for dx in 0..self.kw {
                                gi[at(input_shape, c, oy * self.kh + dy, ox * self.kw + dx)] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    /// One add per window element per output element.
    pub fn flops(&self, input: TensorShape) -> Result<usize> {
        Ok(self.output_shape(input)?.elements() * self.kh * self.kw)
    }
}

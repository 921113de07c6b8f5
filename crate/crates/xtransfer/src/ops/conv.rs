//! 2D convolution with zero padding and square stride.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{at, FeatureBatch, TensorShape};

/// Convolution parameters. Weight layout is `[out_c][in_c][kh][kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients produced by [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// Zero-initialized convolution. `pad_*` is symmetric zero padding.
    pub fn new(in_c: usize, out_c: usize, kh: usize, kw: usize, stride: usize, pad_h: usize, pad_w: usize) -> Self {
        Self {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            weight: vec![0.0; out_c * in_c * kh * kw],
            bias: vec![0.0; out_c],
        }
    }

    /// "Same" convolution for odd kernels at stride 1; kernel is clamped to
    /// the spatial extent so 1D-shaped inputs (height 1) stay valid.
    pub fn same(in_c: usize, out_c: usize, k: usize, input: TensorShape) -> Self {
        let kh = k.min(input.height);
        let kw = k.min(input.width);
        Self::new(in_c, out_c, kh, kw, 1, kh / 2, kw / 2)
    }

    /// Kaiming-uniform initialization (fan-in scaled), bias zero.
    pub fn init_kaiming(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_c * self.kh * self.kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in self.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        for b in self.bias.iter_mut() {
            *b = 0.0;
        }
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        if input.channels != self.in_c {
            return Err(Error::Shape {
                expected: format!("{} input channels", self.in_c),
                got: format!("{}", input.channels),
            });
        }
        let h = input.height + 2 * self.pad_h;
        let w = input.width + 2 * self.pad_w;
        if h < self.kh || w < self.kw {
            return Err(Error::Shape {
                expected: format!("spatial >= {}x{}", self.kh, self.kw),
                got: format!("{}x{} after padding", h, w),
            });
        }
        Ok(TensorShape::new(
            self.out_c,
            (h - self.kh) / self.stride + 1,
            (w - self.kw) / self.stride + 1,
        ))
    }

    pub fn forward(&self, input: &FeatureBatch) -> Result<FeatureBatch> {
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape)?;
        let mut out = FeatureBatch::zeros(out_shape, input.len());
        for s in 0..input.len() {
            let x = input.sample(s);
            let y = out.sample_mut(s);
            for oc in 0..self.out_c {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let mut acc = self.bias[oc];
                        for ic in 0..self.in_c {
                            for dy in 0..self.kh {
                                let iy = (oy * self.stride + dy) as isize - self.pad_h as isize;
                                if iy < 0 || iy >= in_shape.height as isize {
                                    continue;
                                }
                                for dx in 0..self.kw {
                                    let ix = (ox * self.stride + dx) as isize - self.pad_w as isize;
                                    if ix < 0 || ix >= in_shape.width as isize {
                                        continue;
                                    }
                                    acc += self.w(oc, ic, dy, dx)
                                        * x[at(in_shape, ic, iy as usize, ix as usize)];
                                }
                            }
                        }
                        y[at(out_shape, oc, oy, ox)] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss w.r.t. input, weight and bias, given the
    /// forward input and the loss gradient at the output.
    pub fn backward(
        &self,
        input: &FeatureBatch,
        grad_out: &FeatureBatch,
    ) -> Result<(FeatureBatch, Conv2dGrad)> {
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape)?;
        grad_out.expect_shape(out_shape)?;
        let mut grad_in = FeatureBatch::zeros(in_shape, input.len());
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for s in 0..input.len() {
            let x = input.sample(s);
            let go = grad_out.sample(s);
            let gi = grad_in.sample_mut(s);
            for oc in 0..self.out_c {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let g = go[at(out_shape, oc, oy, ox)];
                        if g == 0.0 {
                            continue;
                        }
                        gb[oc] += g;
                        for ic in 0..self.in_c {
                            for dy in 0..self.kh {
                                let iy = (oy * self.stride + dy) as isize - self.pad_h as isize;
                                if iy < 0 || iy >= in_shape.height as isize {
                                    continue;
                                }
                                for dx in 0..self.kw {
                                    let ix = (ox * self.stride + dx) as isize - self.pad_w as isize;
                                    if ix < 0 || ix >= in_shape.width as isize {
                                        continue;
                                    }
                                    let xi = at(in_shape, ic, iy as usize, ix as usize);
                                    gw[self.widx(oc, ic, dy, dx)] += g * x[xi];
                                    gi[xi] += g * self.w(oc, ic, dy, dx);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((grad_in, Conv2dGrad { weight: gw, bias: gb }))
    }

    pub fn params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Multiply-accumulate counted as two ops, plus one add per output
    /// element for the bias.
    pub fn flops(&self, input: TensorShape) -> Result<usize> {
        let out = self.output_shape(input)?;
        Ok(out.elements() * (2 * self.in_c * self.kh * self.kw) + out.elements())
    }

    #[inline]
    fn widx(&self, oc: usize, ic: usize, dy: usize, dx: usize) -> usize {
        ((oc * self.in_c + ic) * self.kh + dy) * self.kw + dx
    }

    #[inline]
    fn w(&self, oc: usize, ic: usize, dy: usize, dx: usize) -> f64 {
        self.weight[self.widx(oc, ic, dy, dx)]
    }
}

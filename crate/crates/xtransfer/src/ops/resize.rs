//! Bilinear spatial resizing.
//!
//! Convention: half-pixel centers without corner alignment — source
//! coordinate `s = (d + 0.5) * in/out - 0.5`, clamped to the valid range.
//! This matches the usual `align_corners=false` definition, so identical
//! sizes reproduce the input exactly and single-pixel inputs broadcast.

use crate::error::Result;
use crate::tensor::{at, FeatureBatch, TensorShape};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_dim: usize, out_dim: usize) -> Vec<Tap> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            Tap { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

/// Resize every sample to `(channels, out_h, out_w)`.
pub fn resize_bilinear(input: &FeatureBatch, out_h: usize, out_w: usize) -> Result<FeatureBatch> {
    let in_shape = input.shape();
    let out_shape = TensorShape::new(in_shape.channels, out_h, out_w);
    if in_shape.height == out_h && in_shape.width == out_w {
        return Ok(input.clone());
    }
    let ys = taps(in_shape.height, out_h);
    let xs = taps(in_shape.width, out_w);
    let mut out = FeatureBatch::zeros(out_shape, input.len());
    for s in 0..input.len() {
        let x = input.sample(s);
        let y = out.sample_mut(s);
        for c in 0..in_shape.channels {
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let v00 = x[at(in_shape, c, ty.lo, tx.lo)];
                    let v01 = x[at(in_shape, c, ty.lo, tx.hi)];
                    let v10 = x[at(in_shape, c, ty.hi, tx.lo)];
                    let v11 = x[at(in_shape, c, ty.hi, tx.hi)];
                    let top = v00 + (v01 - v00) * tx.frac;
                    let bot = v10 + (v11 - v10) * tx.frac;
                    y[at(out_shape, c, oy, ox)] = top + (bot - top) * ty.frac;
                }
            }
        }
    }
    Ok(out)
}

/// Scatter the output gradient back through the interpolation weights.
pub fn resize_bilinear_backward(
    input_shape: TensorShape,
    grad_out: &FeatureBatch,
) -> Result<FeatureBatch> {
    let out_shape = grad_out.shape();
    if input_shape.height == out_shape.height && input_shape.width == out_shape.width {
        return Ok(grad_out.clone());
    }
    let ys = taps(input_shape.height, out_shape.height);
    let xs = taps(input_shape.width, out_shape.width);
    let mut grad_in = FeatureBatch::zeros(input_shape, grad_out.len());
    for s in 0..grad_out.len() {
        let go = grad_out.sample(s);
        let gi = grad_in.sample_mut(s);
        for c in 0..input_shape.channels {
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let g = go[at(out_shape, c, oy, ox)];
                    gi[at(input_shape, c, ty.lo, tx.lo)] += g * (1.0 - ty.frac) * (1.0 - tx.frac);
                    gi[at(input_shape, c, ty.lo, tx.hi)] += g * (1.0 - ty.frac) * tx.frac;
                    gi[at(input_shape, c, ty.hi, tx.lo)] += g * ty.frac * (1.0 - tx.frac);
                    gi[at(input_shape, c, ty.hi, tx.hi)] += g * ty.frac * tx.frac;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Interpolation cost per output element (4 reads, 3 lerp mul/add pairs ~ 7).
pub fn resize_flops(out_shape: TensorShape) -> usize {
    7 * out_shape.elements()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check::{assert_close, finite_difference};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_resize_is_exact() {
        let shape = TensorShape::new(2, 3, 3);
        let data: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let x = FeatureBatch::new(shape, data.clone()).unwrap();
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn hand_computed_1d_upsample() {
        // Width 2 -> 4 with half-pixel centers:
        // [a, 0.75a + 0.25b, 0.25a + 0.75b, b]
        let x = FeatureBatch::new(TensorShape::new(1, 1, 2), vec![4.0, 8.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let expect = [4.0, 5.0, 7.0, 8.0];
        for (v, e) in y.data().iter().zip(&expect) {
            assert_abs_diff_eq!(v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_computed_1d_downsample() {
        // Width 4 -> 2: centers land at source 0.5 and 2.5.
        let x = FeatureBatch::new(TensorShape::new(1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = resize_bilinear(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5]);
    }

    #[test]
    fn single_pixel_broadcasts() {
        let x = FeatureBatch::new(TensorShape::new(1, 1, 1), vec![3.25]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = FeatureBatch::new(TensorShape::new(1, 5, 7), vec![2.5; 35]).unwrap();
        for &(h, w) in &[(3, 3), (9, 13), (1, 128)] {
            let y = resize_bilinear(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12), "{h}x{w}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for &(in_h, in_w, out_h, out_w) in &[(3usize, 4usize, 5usize, 7usize), (6, 6, 3, 3), (1, 8, 1, 5)] {
            let in_shape = TensorShape::new(2, in_h, in_w);
            let x_data: Vec<f64> = (0..in_shape.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out_shape = TensorShape::new(2, out_h, out_w);
            let coef: Vec<f64> = (0..out_shape.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |p: &[f64]| -> f64 {
                let y = resize_bilinear(&FeatureBatch::new(in_shape, p.to_vec()).unwrap(), out_h, out_w).unwrap();
                y.data().iter().zip(&coef).map(|(v, c)| v * c).sum()
            };
            let mut flat = x_data;
            let numeric = finite_difference(&mut flat, loss, 1e-5);
            let go = FeatureBatch::new(out_shape, coef.clone()).unwrap();
            let analytic = resize_bilinear_backward(in_shape, &go).unwrap();
            assert_close(analytic.data(), &numeric, 1e-6, "resize grad_in");
        }
    }
}

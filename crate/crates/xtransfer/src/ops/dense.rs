//! Fully connected affine layer over flattened samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureBatch, TensorShape};

/// `y = W x + b` on the flattened sample. Weight layout is `[out][in]`.
/// Output shape is `(out_features, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }

    /// Identity map; requires square dimensions.
    pub fn identity(features: usize) -> Self {
        let mut d = Self::new(features, features);
        for i in 0..features {
            d.weight[i * features + i] = 1.0;
        }
        d
    }

    pub fn init_kaiming(&mut self, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / self.in_features as f64).sqrt();
        for w in self.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        for b in self.bias.iter_mut() {
            *b = 0.0;
        }
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        if input.elements() != self.in_features {
            return Err(Error::Shape {
                expected: format!("{} flattened features", self.in_features),
                got: format!("{} ({input})", input.elements()),
            });
        }
        Ok(TensorShape::new(self.out_features, 1, 1))
    }

    pub fn forward(&self, input: &FeatureBatch) -> Result<FeatureBatch> {
        let out_shape = self.output_shape(input.shape())?;
        let mut out = FeatureBatch::zeros(out_shape, input.len());
        for s in 0..input.len() {
            let x = input.sample(s);
            let y = out.sample_mut(s);
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                *yo = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &FeatureBatch,
        grad_out: &FeatureBatch,
    ) -> Result<(FeatureBatch, DenseGrad)> {
        let out_shape = self.output_shape(input.shape())?;
        grad_out.expect_shape(out_shape)?;
        let mut grad_in = FeatureBatch::zeros(input.shape(), input.len());
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for s in 0..input.len() {
            let x = input.sample(s);
            let go = grad_out.sample(s);
            let gi = grad_in.sample_mut(s);
            for (o, &g) in go.iter().enumerate() {
                gb[o] += g;
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let grow = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                for i in 0..self.in_features {
                    grow[i] += g * x[i];
                    gi[i] += g * row[i];
                }
            }
        }
        Ok((grad_in, DenseGrad { weight: gw, bias: gb }))
    }

    pub fn params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn flops(&self) -> usize {
        2 * self.in_features * self.out_features + self.out_features
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check::{assert_close, finite_difference};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_preserves_any_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shape = TensorShape::new(5, 1, 1);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = FeatureBatch::new(shape, data.clone()).unwrap();
        let y = Dense::identity(5).forward(&x).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn resource_counts_for_10_to_10() {
        let d = Dense::new(10, 10);
        assert_eq!(d.params(), 110);
        assert_eq!(d.flops(), 2 * 10 * 10 + 10);
    }

    #[test]
    fn flattens_spatial_input() {
        let d = Dense::new(8, 3);
        let out = d.output_shape(TensorShape::new(2, 2, 2)).unwrap();
        assert_eq!(out, TensorShape::new(3, 1, 1));
        assert!(d.output_shape(TensorShape::new(2, 2, 3)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut d = Dense::new(6, 4);
        d.init_kaiming(&mut rng);
        for b in d.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let in_shape = TensorShape::new(3, 1, 2);
        let x_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = FeatureBatch::new(in_shape, x_data.clone()).unwrap();
        let coef: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |d: &Dense, xb: &FeatureBatch| -> f64 {
            d.forward(xb).unwrap().data().iter().zip(&coef).map(|(y, c)| y * c).sum()
        };

        let go = FeatureBatch::new(TensorShape::new(4, 1, 1), coef.clone()).unwrap();
        let (grad_in, grads) = d.backward(&x, &go).unwrap();

        let mut x_flat = x_data;
        let numeric_in = finite_difference(
            &mut x_flat,
            |p| loss(&d, &FeatureBatch::new(in_shape, p.to_vec()).unwrap()),
            1e-5,
        );
        assert_close(grad_in.data(), &numeric_in, 1e-6, "dense grad_in");

        let mut w_flat = d.weight.clone();
        let numeric_w = finite_difference(
            &mut w_flat,
            |p| loss(&Dense { weight: p.to_vec(), ..d.clone() }, &x),
            1e-5,
        );
        assert_close(&grads.weight, &numeric_w, 1e-6, "dense grad_w");

        let mut b_flat = d.bias.clone();
        let numeric_b = finite_difference(
            &mut b_flat,
            |p| loss(&Dense { bias: p.to_vec(), ..d.clone() }, &x),
            1e-5,
        );
        assert_close(&grads.bias, &numeric_b, 1e-6, "dense grad_b");
    }
}

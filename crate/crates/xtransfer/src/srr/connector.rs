//! The trainable connector spliced in front of a frozen L-unit, and the
//! non-trainable default reshaping baseline.
//!
//! A connector maps a batch in the target representation's shape to the
//! downstream unit's expected input shape:
//!
//! ```text
//! pre-header 1×1 conv (channels) → bilinear resize (spatial)
//!     → encoder conv (÷r channels) → ReLU → decoder conv (restore channels)
//! ```
//!
//! All three convolutions are trainable; everything downstream stays frozen.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::Result;
use crate::ops::{
    relu, relu_backward, resize_bilinear, resize_bilinear_backward, resize_flops, Conv2d,
    Conv2dGrad,
};
use crate::tensor::{at, FeatureBatch, TensorShape};
use crate::zoo::ResourceCost;

/// Ratio between the encoder's input and output channels.
pub const DEFAULT_BOTTLENECK_RATIO: usize = 4;

/// Trainable adapter from a target-shaped batch to a unit's expected input.
#[derive(Debug, Clone)]
pub struct Connector {
    pub target_shape: TensorShape,
    pub expected_shape: TensorShape,
    /// 1×1 channel mapping at the target's spatial dims.
    pub(crate) pre_header: Conv2d,
    /// 3×3 (clamped) bottleneck at the expected spatial dims.
    pub(crate) encoder: Conv2d,
    /// 3×3 (clamped) expansion back to the expected channel count.
    pub(crate) decoder: Conv2d,
}

/// Parameter gradients for one connector, in slot order.
#[derive(Debug, Clone)]
pub struct ConnectorGrads {
    pub pre_header: Conv2dGrad,
    pub encoder: Conv2dGrad,
    pub decoder: Conv2dGrad,
}

/// Intermediates cached by [`Connector::forward_cached`].
#[derive(Debug)]
pub struct ConnectorCache {
    input: FeatureBatch,
    pre_out: FeatureBatch,
    resized: FeatureBatch,
    enc_z: FeatureBatch,
    enc_a: FeatureBatch,
}

/// Build a seeded connector. Channel bottleneck is `expected.channels / r`
/// (floor, at least 1); weights use fan-in-scaled normal init, biases zero.
pub fn build_connector(
    target_shape: TensorShape,
    expected_shape: TensorShape,
    r: usize,
    seed: u64,
) -> Connector {
    let bottleneck = (expected_shape.channels / r.max(1)).max(1);
    let mut connector = connector_structure(target_shape, expected_shape, bottleneck);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in [&mut connector.pre_header, &mut connector.encoder, &mut connector.decoder] {
        init_scaled_normal(conv, &mut rng);
    }
    connector
}

/// Connector with the right operator shapes and zeroed weights, for
/// deserialization.
pub(crate) fn connector_structure(
    target_shape: TensorShape,
    expected_shape: TensorShape,
    bottleneck: usize,
) -> Connector {
    let pre_header = Conv2d::new(target_shape.channels, expected_shape.channels, 1, 1, 1, 0, 0);
    let encoder = Conv2d::same(expected_shape.channels, bottleneck, 3, expected_shape);
    let decoder = Conv2d::same(bottleneck, expected_shape.channels, 3, expected_shape);
    Connector { target_shape, expected_shape, pre_header, encoder, decoder }
}

fn init_scaled_normal(conv: &mut Conv2d, rng: &mut ChaCha8Rng) {
    let fan_in = (conv.in_c * conv.kh * conv.kw) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    for w in conv.weight.iter_mut() {
        *w = rng.sample(dist);
    }
    for b in conv.bias.iter_mut() {
        *b = 0.0;
    }
}

impl Connector {
    pub fn forward(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        Ok(self.forward_cached(batch)?.0)
    }

    pub fn forward_cached(&self, batch: &FeatureBatch) -> Result<(FeatureBatch, ConnectorCache)> {
        batch.expect_shape(self.target_shape)?;
        let pre_out = self.pre_header.forward(batch)?;
        let resized =
            resize_bilinear(&pre_out, self.expected_shape.height, self.expected_shape.width)?;
        let enc_z = self.encoder.forward(&resized)?;
        let enc_a = relu(&enc_z);
        let out = self.decoder.forward(&enc_a)?;
        debug_assert_eq!(out.shape(), self.expected_shape);
        let cache = ConnectorCache { input: batch.clone(), pre_out, resized, enc_z, enc_a };
        Ok((out, cache))
    }

    /// Gradients of a scalar loss w.r.t. every connector parameter, given the
    /// loss gradient at the connector output.
    pub fn backward(
        &self,
        cache: &ConnectorCache,
        grad_out: &FeatureBatch,
    ) -> Result<ConnectorGrads> {
        Ok(self.backward_with_input(cache, grad_out)?.1)
    }

    /// [`Connector::backward`] plus the gradient at the connector input, so
    /// stacked layers can keep propagating.
    pub fn backward_with_input(
        &self,
        cache: &ConnectorCache,
        grad_out: &FeatureBatch,
    ) -> Result<(FeatureBatch, ConnectorGrads)> {
        let (g_enc_a, dec_grad) = self.decoder.backward(&cache.enc_a, grad_out)?;
        let g_enc_z = relu_backward(&cache.enc_z, &g_enc_a);
        let (g_resized, enc_grad) = self.encoder.backward(&cache.resized, &g_enc_z)?;
        let g_pre = resize_bilinear_backward(cache.pre_out.shape(), &g_resized)?;
        let (g_in, pre_grad) = self.pre_header.backward(&cache.input, &g_pre)?;
        Ok((g_in, ConnectorGrads { pre_header: pre_grad, encoder: enc_grad, decoder: dec_grad }))
    }

    /// Named parameter arrays in a stable order (mirrors the L-unit scheme).
    pub(crate) fn param_slots(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("pre_header.weight", &self.pre_header.weight),
            ("pre_header.bias", &self.pre_header.bias),
            ("encoder.weight", &self.encoder.weight),
            ("encoder.bias", &self.encoder.bias),
            ("decoder.weight", &self.decoder.weight),
            ("decoder.bias", &self.decoder.bias),
        ]
    }

    pub(crate) fn param_slots_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("pre_header.weight", &mut self.pre_header.weight),
            ("pre_header.bias", &mut self.pre_header.bias),
            ("encoder.weight", &mut self.encoder.weight),
            ("encoder.bias", &mut self.encoder.bias),
            ("decoder.weight", &mut self.decoder.weight),
            ("decoder.bias", &mut self.decoder.bias),
        ]
    }

    /// Gradient arrays in the same order as [`Connector::param_slots`].
    pub(crate) fn grad_slots(grads: &ConnectorGrads) -> [&Vec<f64>; 6] {
        [
            &grads.pre_header.weight,
            &grads.pre_header.bias,
            &grads.encoder.weight,
            &grads.encoder.bias,
            &grads.decoder.weight,
            &grads.decoder.bias,
        ]
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, slot) in self.param_slots() {
            out.extend_from_slice(slot);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.pre_header.params() + self.encoder.params() + self.decoder.params()
    }

    /// Per-sample forward cost plus parameter count.
    pub fn cost(&self) -> ResourceCost {
        let resized_shape = TensorShape::new(
            self.expected_shape.channels,
            self.expected_shape.height,
            self.expected_shape.width,
        );
        let enc_out = self
            .encoder
            .output_shape(resized_shape)
            .expect("encoder shape fixed at construction");
        let flops = self.pre_header.flops(self.target_shape).expect("pre-header shape fixed")
            + resize_flops(resized_shape)
            + self.encoder.flops(resized_shape).expect("encoder shape fixed")
            + self.decoder.flops(enc_out).expect("decoder shape fixed");
        ResourceCost { flops, params: self.param_count() }
    }
}

/// Non-trainable reshaping: bilinear spatial resize, then a fixed 1×1
/// channel map (identity when channel counts match, uniform averaging
/// otherwise).
pub fn default_reshape(batch: &FeatureBatch, expected_shape: TensorShape) -> Result<FeatureBatch> {
    let resized = resize_bilinear(batch, expected_shape.height, expected_shape.width)?;
    let in_c = resized.shape().channels;
    if in_c == expected_shape.channels {
        return Ok(resized);
    }
    let mut out = FeatureBatch::zeros(expected_shape, resized.len());
    let spatial = expected_shape.spatial();
    let weight = 1.0 / in_c as f64;
    for s in 0..resized.len() {
        let x = resized.sample(s);
        let y = out.sample_mut(s);
        for oc in 0..expected_shape.channels {
            for p in 0..spatial {
                let mut acc = 0.0;
                for ic in 0..in_c {
                    acc += x[ic * spatial + p];
                }
                y[oc * spatial + p] = acc * weight;
            }
        }
    }
    Ok(out)
}

/// Resource cost of [`default_reshape`] (resize plus, when the channel
/// counts differ, the fixed averaging map; no parameters).
pub fn default_reshape_cost(input: TensorShape, expected: TensorShape) -> ResourceCost {
    let resized = TensorShape::new(input.channels, expected.height, expected.width);
    let mut flops = resize_flops(resized);
    if input.channels != expected.channels {
        flops += expected.elements() * 2 * input.channels;
    }
    ResourceCost { flops, params: 0 }
}

//! The model zoo: frozen source models segmented into L-units.
//!
//! An L-unit is the atomic grain of the search — a single layer or an
//! inseparable block (a residual block is never split). Units carry their
//! shapes and resource costs; their parameters are immutable after
//! construction, which the rest of the pipeline relies on (repair trains
//! connectors only, never units).

pub(crate) mod manifest;
pub(crate) mod spec;
mod synthetic;

pub use manifest::{load_source_model, save_source_model};
pub use spec::{LayerSpec, ModelSpec, segment_model};
pub use synthetic::{
    generate_exemplars, generate_split, generate_synthetic_source,
    generate_synthetic_source_indexed, SyntheticFamily,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{add, relu, relu_backward, AvgPool2d, Conv2d, Dense};
use crate::tensor::{FeatureBatch, TensorShape};

/// Position of an L-unit in the zoo: model index `i`, depth index `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub model: usize,
    pub depth: usize,
}

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L[{},{}]", self.model, self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ConvBlock,
    ResidualBlock,
    Pool,
    Dense,
}

/// FLOPs and parameter counts; additive under concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceCost {
    pub flops: usize,
    pub params: usize,
}

impl std::ops::Add for ResourceCost {
    type Output = ResourceCost;
    fn add(self, rhs: ResourceCost) -> ResourceCost {
        ResourceCost { flops: self.flops + rhs.flops, params: self.params + rhs.params }
    }
}

impl std::ops::AddAssign for ResourceCost {
    fn add_assign(&mut self, rhs: ResourceCost) {
        self.flops += rhs.flops;
        self.params += rhs.params;
    }
}

/// The computational content of an L-unit. Private to keep parameters
/// frozen; construction goes through [`segment_model`].
#[derive(Debug, Clone)]
pub(crate) enum UnitLayers {
    /// Convolution followed by ReLU.
    ConvBlock { conv: Conv2d },
    /// conv → ReLU → conv, merged with a (possibly projected) shortcut,
    /// then ReLU. Atomic: never split by the search.
    Residual { conv1: Conv2d, conv2: Conv2d, proj: Option<Conv2d> },
    Pool { pool: AvgPool2d },
    /// Pure affine map on the flattened sample (no nonlinearity).
    Dense { dense: Dense },
}

/// A frozen layer block with shape and resource metadata.
#[derive(Debug, Clone)]
pub struct LUnit {
    pub id: UnitId,
    pub kind: UnitKind,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    pub flops: usize,
    pub param_count: usize,
    pub(crate) layers: UnitLayers,
}

/// Intermediate activations needed to backpropagate through a frozen unit.
#[derive(Debug)]
pub struct UnitCache {
    input: FeatureBatch,
    inner: Vec<FeatureBatch>,
}

impl LUnit {
    pub(crate) fn from_layers(
        id: UnitId,
        layers: UnitLayers,
        in_shape: TensorShape,
    ) -> Result<Self> {
        let (kind, out_shape, flops, param_count) = match &layers {
            UnitLayers::ConvBlock { conv } => {
                let out = conv.output_shape(in_shape)?;
                (UnitKind::ConvBlock, out, conv.flops(in_shape)?, conv.params())
            }
            UnitLayers::Residual { conv1, conv2, proj } => {
                let mid = conv1.output_shape(in_shape)?;
                let out = conv2.output_shape(mid)?;
                let mut flops = conv1.flops(in_shape)? + conv2.flops(mid)?;
                let mut params = conv1.params() + conv2.params();
                if let Some(p) = proj {
                    let branch = p.output_shape(in_shape)?;
                    if branch != out {
                        return Err(Error::Segmentation(format!(
                            "residual shortcut shape {branch} does not match trunk {out}"
                        )));
                    }
                    flops += p.flops(in_shape)?;
                    params += p.params();
                } else if out != in_shape {
                    return Err(Error::Segmentation(format!(
                        "residual without projection needs matching shapes, got {in_shape} -> {out}"
                    )));
                }
                flops += out.elements(); // the merge add
                (UnitKind::ResidualBlock, out, flops, params)
            }
            UnitLayers::Pool { pool } => {
                let out = pool.output_shape(in_shape)?;
                (UnitKind::Pool, out, pool.flops(in_shape)?, 0)
            }
            UnitLayers::Dense { dense } => {
                let out = dense.output_shape(in_shape)?;
                (UnitKind::Dense, out, dense.flops(), dense.params())
            }
        };
        Ok(LUnit { id, kind, in_shape, out_shape, flops, param_count, layers })
    }

    /// Named parameter arrays in a stable order (the blob layout order).
    pub(crate) fn param_slots(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match &self.layers {
            UnitLayers::ConvBlock { conv } => {
                vec![("conv.weight", &conv.weight), ("conv.bias", &conv.bias)]
            }
            UnitLayers::Residual { conv1, conv2, proj } => {
                let mut slots = vec![
                    ("conv1.weight", &conv1.weight),
                    ("conv1.bias", &conv1.bias),
                    ("conv2.weight", &conv2.weight),
                    ("conv2.bias", &conv2.bias),
                ];
                if let Some(p) = proj {
                    slots.push(("proj.weight", &p.weight));
                    slots.push(("proj.bias", &p.bias));
                }
                slots
            }
            UnitLayers::Pool { .. } => vec![],
            UnitLayers::Dense { dense } => {
                vec![("dense.weight", &dense.weight), ("dense.bias", &dense.bias)]
            }
        }
    }

    pub(crate) fn param_slots_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match &mut self.layers {
            UnitLayers::ConvBlock { conv } => {
                vec![("conv.weight", &mut conv.weight), ("conv.bias", &mut conv.bias)]
            }
            UnitLayers::Residual { conv1, conv2, proj } => {
                let mut slots = vec![
                    ("conv1.weight", &mut conv1.weight),
                    ("conv1.bias", &mut conv1.bias),
                    ("conv2.weight", &mut conv2.weight),
                    ("conv2.bias", &mut conv2.bias),
                ];
                if let Some(p) = proj {
                    slots.push(("proj.weight", &mut p.weight));
                    slots.push(("proj.bias", &mut p.bias));
                }
                slots
            }
            UnitLayers::Pool { .. } => vec![],
            UnitLayers::Dense { dense } => {
                vec![("dense.weight", &mut dense.weight), ("dense.bias", &mut dense.bias)]
            }
        }
    }

    /// Flat copy of the frozen parameters, in construction order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count);
        for (_, slot) in self.param_slots() {
            out.extend_from_slice(slot);
        }
        out
    }

    /// SHA-256 of the parameters as little-endian f32 (the serialized form),
    /// used to verify the freeze contract.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.params_flat() {
            hasher.update((v as f32).to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic forward pass through one frozen unit.
pub fn forward_lunit(unit: &LUnit, batch: &FeatureBatch) -> Result<FeatureBatch> {
    Ok(forward_lunit_cached(unit, batch)?.0)
}

/// Forward pass that also returns the intermediates needed by
/// [`backward_lunit`]. Used when training a connector placed before the unit.
pub fn forward_lunit_cached(unit: &LUnit, batch: &FeatureBatch) -> Result<(FeatureBatch, UnitCache)> {
    batch.expect_shape(unit.in_shape)?;
    let input = batch.clone();
    let (out, inner) = match &unit.layers {
        UnitLayers::ConvBlock { conv } => {
            let z = conv.forward(batch)?;
            (relu(&z), vec![z])
        }
        UnitLayers::Residual { conv1, conv2, proj } => {
            let z1 = conv1.forward(batch)?;
            let a1 = relu(&z1);
            let z2 = conv2.forward(&a1)?;
            let branch = match proj {
                Some(p) => p.forward(batch)?,
                None => batch.clone(),
            };
            let s = add(&z2, &branch);
            (relu(&s), vec![z1, a1, s])
        }
        UnitLayers::Pool { pool } => (pool.forward(batch)?, vec![]),
        UnitLayers::Dense { dense } => (dense.forward(batch)?, vec![]),
    };
    Ok((out, UnitCache { input, inner }))
}

/// Gradient of a scalar loss w.r.t. the unit input. The unit is frozen, so
/// no parameter gradients exist by construction.
pub fn backward_lunit(unit: &LUnit, cache: &UnitCache, grad_out: &FeatureBatch) -> Result<FeatureBatch> {
    grad_out.expect_shape(unit.out_shape)?;
    match &unit.layers {
        UnitLayers::ConvBlock { conv } => {
            let z = &cache.inner[0];
            let gz = relu_backward(z, grad_out);
            Ok(conv.backward(&cache.input, &gz)?.0)
        }
        UnitLayers::Residual { conv1, conv2, proj } => {
            let (z1, a1, s) = (&cache.inner[0], &cache.inner[1], &cache.inner[2]);
            let gs = relu_backward(s, grad_out);
            let ga1 = conv2.backward(a1, &gs)?.0;
            let gz1 = relu_backward(z1, &ga1);
            let g_trunk = conv1.backward(&cache.input, &gz1)?.0;
            let g_branch = match proj {
                Some(p) => p.backward(&cache.input, &gs)?.0,
                None => gs,
            };
            Ok(add(&g_trunk, &g_branch))
        }
        UnitLayers::Pool { pool } => pool.backward(cache.input.shape(), grad_out),
        UnitLayers::Dense { dense } => Ok(dense.backward(&cache.input, grad_out)?.0),
    }
}

/// [`backward_lunit`] variant that also returns parameter gradients in
/// [`LUnit::param_slots`] order. Exists solely for the full fine-tune
/// baseline, which deliberately breaks the freeze contract for comparison;
/// the pipeline itself never updates unit parameters.
pub(crate) fn backward_lunit_trainable(
    unit: &LUnit,
    cache: &UnitCache,
    grad_out: &FeatureBatch,
) -> Result<(FeatureBatch, Vec<Vec<f64>>)> {
    grad_out.expect_shape(unit.out_shape)?;
    match &unit.layers {
        UnitLayers::ConvBlock { conv } => {
            let z = &cache.inner[0];
            let gz = relu_backward(z, grad_out);
            let (g_in, g) = conv.backward(&cache.input, &gz)?;
            Ok((g_in, vec![g.weight, g.bias]))
        }
        UnitLayers::Residual { conv1, conv2, proj } => {
            let (z1, a1, s) = (&cache.inner[0], &cache.inner[1], &cache.inner[2]);
            let gs = relu_backward(s, grad_out);
            let (ga1, g2) = conv2.backward(a1, &gs)?;
            let gz1 = relu_backward(z1, &ga1);
            let (g_trunk, g1) = conv1.backward(&cache.input, &gz1)?;
            let mut grads = vec![g1.weight, g1.bias, g2.weight, g2.bias];
            let g_in = match proj {
                Some(p) => {
                    let (g_branch, gp) = p.backward(&cache.input, &gs)?;
                    grads.push(gp.weight);
                    grads.push(gp.bias);
                    add(&g_trunk, &g_branch)
                }
                None => add(&g_trunk, &gs),
            };
            Ok((g_in, grads))
        }
        UnitLayers::Pool { pool } => Ok((pool.backward(cache.input.shape(), grad_out)?, vec![])),
        UnitLayers::Dense { dense } => {
            let (g_in, g) = dense.backward(&cache.input, grad_out)?;
            Ok((g_in, vec![g.weight, g.bias]))
        }
    }
}

/// Per-unit resource cost under the stated FLOPs convention (2 ops per MAC,
/// one add per bias/merge element, pooling counts window sums).
pub fn resource_of(unit: &LUnit) -> ResourceCost {
    ResourceCost { flops: unit.flops, params: unit.param_count }
}

/// A frozen source model: an ordered chain of L-units plus the input-level
/// exemplars its anchor statistics are computed from.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub model_index: usize,
    pub lunits: Vec<LUnit>,
    /// Class label set, ascending.
    pub source_classes: Vec<usize>,
    /// Input-level samples for anchor statistics.
    pub exemplars: FeatureBatch,
    pub exemplar_labels: Vec<usize>,
    /// Generation seed (provenance; 0 for hand-built specs).
    pub seed: u64,
}

impl SourceModel {
    pub fn input_shape(&self) -> TensorShape {
        self.lunits[0].in_shape
    }

    pub fn depth(&self) -> usize {
        self.lunits.len()
    }

    /// Forward a batch through units `0..=depth`, returning the final output.
    pub fn forward_to(&self, batch: &FeatureBatch, depth: usize) -> Result<FeatureBatch> {
        let mut cur = batch.clone();
        for unit in &self.lunits[..=depth] {
            cur = forward_lunit(unit, &cur)?;
        }
        Ok(cur)
    }

    /// Outputs of every unit when forwarding `batch` through the whole chain.
    pub fn forward_all(&self, batch: &FeatureBatch) -> Result<Vec<FeatureBatch>> {
        let mut outs = Vec::with_capacity(self.lunits.len());
        let mut cur = batch.clone();
        for unit in &self.lunits {
            cur = forward_lunit(unit, &cur)?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    pub fn total_cost(&self) -> ResourceCost {
        self.lunits.iter().map(resource_of).fold(ResourceCost::default(), |a, b| a + b)
    }

    /// Concatenated [`LUnit::param_hash`] digests, for freeze-contract checks.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for unit in &self.lunits {
            hasher.update(unit.param_hash().as_bytes());
        }
        hex(&hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check::{assert_close, finite_difference};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_unit(kind: UnitKind, in_shape: TensorShape, seed: u64) -> LUnit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match kind {
            UnitKind::ConvBlock => {
                let mut conv = Conv2d::same(in_shape.channels, in_shape.channels + 1, 3, in_shape);
                conv.init_kaiming(&mut rng);
                UnitLayers::ConvBlock { conv }
            }
            UnitKind::ResidualBlock => {
                let mut conv1 = Conv2d::same(in_shape.channels, in_shape.channels, 3, in_shape);
                let mut conv2 = Conv2d::same(in_shape.channels, in_shape.channels, 3, in_shape);
                conv1.init_kaiming(&mut rng);
                conv2.init_kaiming(&mut rng);
                UnitLayers::Residual { conv1, conv2, proj: None }
            }
            UnitKind::Pool => UnitLayers::Pool { pool: AvgPool2d::clamped(2, in_shape) },
            UnitKind::Dense => {
                let mut dense = Dense::new(in_shape.elements(), 4);
                dense.init_kaiming(&mut rng);
                UnitLayers::Dense { dense }
            }
        };
        LUnit::from_layers(UnitId { model: 0, depth: 0 }, layers, in_shape).unwrap()
    }

    #[test]
    fn identity_dense_unit_passes_any_batch() {
        let shape = TensorShape::new(4, 1, 1);
        let unit = LUnit::from_layers(
            UnitId { model: 0, depth: 0 },
            UnitLayers::Dense { dense: Dense::identity(4) },
            shape,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let batch = FeatureBatch::new(shape, data.clone()).unwrap();
        let out = forward_lunit(&unit, &batch).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn zero_conv_unit_outputs_bias_only() {
        let shape = TensorShape::new(2, 3, 3);
        let mut conv = Conv2d::same(2, 3, 3, shape);
        conv.bias = vec![0.5, -1.0, 2.0];
        let unit = LUnit::from_layers(
            UnitId { model: 0, depth: 0 },
            UnitLayers::ConvBlock { conv },
            shape,
        )
        .unwrap();
        let batch = FeatureBatch::new(shape, vec![1.0; 18]).unwrap();
        let out = forward_lunit(&unit, &batch).unwrap();
        // ReLU clamps the negative bias channel to zero.
        for c in 0..3 {
            let expect = [0.5, 0.0, 2.0][c];
            for v in &out.sample(0)[c * 9..(c + 1) * 9] {
                assert_eq!(*v, expect);
            }
        }
    }

    #[test]
    fn conv_unit_matches_naive_convolution_oracle() {
        // Independent direct convolution: quadruple loop straight from the
        // definition, no shared code with Conv2d::forward.
        let in_shape = TensorShape::new(2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::new(2, 3, 3, 3, 1, 1, 1);
        for w in conv.weight.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in conv.bias.iter_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
        let weights = conv.weight.clone();
        let bias = conv.bias.clone();
        let data: Vec<f64> = (0..in_shape.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let unit = LUnit::from_layers(
            UnitId { model: 0, depth: 0 },
            UnitLayers::ConvBlock { conv },
            in_shape,
        )
        .unwrap();
        let batch = FeatureBatch::new(in_shape, data.clone()).unwrap();
        let out = forward_lunit(&unit, &batch).unwrap();

        let get = |c: usize, y: isize, x: isize| -> f64 {
            if y < 0 || y >= 4 || x < 0 || x >= 4 {
                0.0
            } else {
                data[(c * 4 + y as usize) * 4 + x as usize]
            }
        };
        for oc in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = bias[oc];
                    for ic in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let w = weights[((oc * 2 + ic) * 3 + dy) * 3 + dx];
                                acc += w * get(ic, oy as isize + dy as isize - 1, ox as isize + dx as isize - 1);
                            }
                        }
                    }
                    let expect = acc.max(0.0); // block applies ReLU
                    let got = out.sample(0)[(oc * 4 + oy) * 4 + ox];
                    assert!((got - expect).abs() < 1e-6, "mismatch at ({oc},{oy},{ox})");
                }
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let unit = toy_unit(UnitKind::ConvBlock, TensorShape::new(2, 4, 4), 1);
        let batch = FeatureBatch::zeros(TensorShape::new(3, 4, 4), 1);
        assert!(matches!(forward_lunit(&unit, &batch), Err(Error::Shape { .. })));
    }

    #[test]
    fn param_hash_stable_across_forward_passes() {
        let unit = toy_unit(UnitKind::ResidualBlock, TensorShape::new(3, 4, 4), 5);
        let before = unit.param_hash();
        let batch = FeatureBatch::zeros(TensorShape::new(3, 4, 4), 2);
        let _ = forward_lunit(&unit, &batch).unwrap();
        assert_eq!(unit.param_hash(), before);
    }

    #[test]
    fn resource_costs_are_additive() {
        let a = toy_unit(UnitKind::ConvBlock, TensorShape::new(2, 4, 4), 1);
        let b = toy_unit(UnitKind::Pool, a.out_shape, 2);
        let sum = resource_of(&a) + resource_of(&b);
        assert_eq!(sum.flops, a.flops + b.flops);
        assert_eq!(sum.params, a.param_count + b.param_count);
    }

    #[test]
    fn backward_matches_finite_differences_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (kind, shape) in [
            (UnitKind::ConvBlock, TensorShape::new(2, 3, 3)),
            (UnitKind::ResidualBlock, TensorShape::new(2, 3, 3)),
            (UnitKind::Pool, TensorShape::new(2, 4, 4)),
            (UnitKind::Dense, TensorShape::new(3, 1, 2)),
        ] {
            let unit = toy_unit(kind, shape, 11);
            let x_data: Vec<f64> = (0..shape.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coef: Vec<f64> = (0..unit.out_shape.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |p: &[f64]| -> f64 {
                let b = FeatureBatch::new(shape, p.to_vec()).unwrap();
                let y = forward_lunit(&unit, &b).unwrap();
                y.data().iter().zip(&coef).map(|(v, c)| v * c).sum()
            };
            let mut flat = x_data.clone();
            let numeric = finite_difference(&mut flat, loss, 1e-5);
            let batch = FeatureBatch::new(shape, x_data).unwrap();
            let (_, cache) = forward_lunit_cached(&unit, &batch).unwrap();
            let go = FeatureBatch::new(unit.out_shape, coef.clone()).unwrap();
            let analytic = backward_lunit(&unit, &cache, &go).unwrap();
            // ReLU kinks make FD slightly noisy; 1e-4 relative is ample here.
            assert_close(analytic.data(), &numeric, 1e-4, &format!("{kind:?} grad_in"));
        }
    }
}

//! Declarative model specs and segmentation into L-units.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{AvgPool2d, Conv2d, Dense};
use crate::tensor::TensorShape;
use crate::zoo::synthetic::{generate_exemplars, SyntheticFamily};
use crate::zoo::{LUnit, SourceModel, UnitId, UnitKind, UnitLayers};

/// One layer (or atomic block) of a model spec, with explicit boundaries.
/// Declared shapes are validated against what the operator actually
/// produces, so a broken chain is caught at segmentation time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: UnitKind,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    /// Kernel size; ignored for dense layers.
    #[serde(default)]
    pub kernel: usize,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

/// A complete source model description: architecture, class structure and
/// the exemplar generator for anchor statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_index: usize,
    pub input_shape: TensorShape,
    pub n_classes: usize,
    pub exemplars_per_class: usize,
    pub family: SyntheticFamily,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

impl LayerSpec {
    /// Spec for a same-padded conv + ReLU block.
    pub fn conv(in_shape: TensorShape, out_c: usize, kernel: usize, seed: u64) -> Self {
        Self {
            kind: UnitKind::ConvBlock,
            in_shape,
            out_shape: TensorShape::new(out_c, in_shape.height, in_shape.width),
            kernel,
            seed,
        }
    }

    /// Spec for an atomic residual block (projected shortcut when channel
    /// counts differ).
    pub fn residual(in_shape: TensorShape, out_c: usize, kernel: usize, seed: u64) -> Self {
        Self {
            kind: UnitKind::ResidualBlock,
            in_shape,
            out_shape: TensorShape::new(out_c, in_shape.height, in_shape.width),
            kernel,
            seed,
        }
    }

    pub fn pool(in_shape: TensorShape, kernel: usize) -> Self {
        let p = AvgPool2d::clamped(kernel, in_shape);
        Self {
            kind: UnitKind::Pool,
            in_shape,
            out_shape: TensorShape::new(
                in_shape.channels,
                in_shape.height / p.kh,
                in_shape.width / p.kw,
            ),
            kernel,
            seed: 0,
        }
    }

    pub fn dense(in_shape: TensorShape, out_features: usize, seed: u64) -> Self {
        Self {
            kind: UnitKind::Dense,
            in_shape,
            out_shape: TensorShape::new(out_features, 1, 1),
            kernel: 0,
            seed,
        }
    }

    fn build(&self, id: UnitId) -> Result<LUnit> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let layers = match self.kind {
            UnitKind::ConvBlock => {
                let mut conv =
                    Conv2d::same(self.in_shape.channels, self.out_shape.channels, self.kernel, self.in_shape);
                conv.init_kaiming(&mut rng);
                UnitLayers::ConvBlock { conv }
            }
            UnitKind::ResidualBlock => {
                let out_c = self.out_shape.channels;
                let mut conv1 = Conv2d::same(self.in_shape.channels, out_c, self.kernel, self.in_shape);
                let mid = TensorShape::new(out_c, self.in_shape.height, self.in_shape.width);
                let mut conv2 = Conv2d::same(out_c, out_c, self.kernel, mid);
                conv1.init_kaiming(&mut rng);
                conv2.init_kaiming(&mut rng);
                let proj = if self.in_shape.channels != out_c {
                    let mut p = Conv2d::new(self.in_shape.channels, out_c, 1, 1, 1, 0, 0);
                    p.init_kaiming(&mut rng);
                    Some(p)
                } else {
                    None
                };
                UnitLayers::Residual { conv1, conv2, proj }
            }
            UnitKind::Pool => UnitLayers::Pool { pool: AvgPool2d::clamped(self.kernel, self.in_shape) },
            UnitKind::Dense => {
                let mut dense = Dense::new(self.in_shape.elements(), self.out_shape.channels);
                dense.init_kaiming(&mut rng);
                UnitLayers::Dense { dense }
            }
        };
        let unit = LUnit::from_layers(id, layers, self.in_shape)?;
        if unit.out_shape != self.out_shape {
            return Err(Error::Segmentation(format!(
                "layer {id}: declared out shape {} but operator produces {}",
                self.out_shape, unit.out_shape
            )));
        }
        Ok(unit)
    }
}

/// Segment a model spec into a chain of frozen L-units.
///
/// Validates the shape chain (each layer's declared input must equal its
/// predecessor's output) and that declared outputs match what each operator
/// produces. Residual blocks remain single units.
pub fn segment_model(spec: &ModelSpec) -> Result<SourceModel> {
    if spec.layers.len() < 2 {
        return Err(Error::Segmentation(format!(
            "model needs >= 2 L-units, spec has {}",
            spec.layers.len()
        )));
    }
    if spec.layers[0].in_shape != spec.input_shape {
        return Err(Error::Segmentation(format!(
            "first layer expects {} but model input is {}",
            spec.layers[0].in_shape, spec.input_shape
        )));
    }
    let mut units = Vec::with_capacity(spec.layers.len());
    for (j, layer) in spec.layers.iter().enumerate() {
        if j > 0 && layer.in_shape != spec.layers[j - 1].out_shape {
            return Err(Error::Segmentation(format!(
                "layer {j}: input {} does not chain from previous output {}",
                layer.in_shape,
                spec.layers[j - 1].out_shape
            )));
        }
        units.push(layer.build(UnitId { model: spec.model_index, depth: j })?);
    }
    let (exemplars, exemplar_labels) = generate_exemplars(
        spec.family,
        spec.seed,
        spec.n_classes,
        spec.input_shape,
        spec.exemplars_per_class,
    )?;
    Ok(SourceModel {
        model_index: spec.model_index,
        lunits: units,
        source_classes: (0..spec.n_classes).collect(),
        exemplars,
        exemplar_labels,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_conv_spec(n_layers: usize) -> ModelSpec {
        let input = TensorShape::new(3, 8, 8);
        let mut layers = Vec::new();
        let mut shape = input;
        for j in 0..n_layers {
            let spec = LayerSpec::conv(shape, 4 + j, 3, j as u64);
            shape = spec.out_shape;
            layers.push(spec);
        }
        ModelSpec {
            model_index: 0,
            input_shape: input,
            n_classes: 4,
            exemplars_per_class: 3,
            family: SyntheticFamily::GaussianBlobs,
            seed: 7,
            layers,
        }
    }

    #[test]
    fn plain_conv_spec_yields_one_unit_per_layer() {
        let model = segment_model(&plain_conv_spec(4)).unwrap();
        assert_eq!(model.depth(), 4);
        assert!(model.lunits.iter().all(|u| u.kind == UnitKind::ConvBlock));
    }

    #[test]
    fn resnet18_style_spec_yields_nine_blocks() {
        // Stem conv + 4 stages of 2 residual blocks = 9 atomic units.
        let input = TensorShape::new(3, 16, 16);
        let mut layers = vec![LayerSpec::conv(input, 8, 3, 0)];
        let mut shape = layers[0].out_shape;
        for stage in 0..4 {
            for block in 0..2 {
                let out_c = 8 + 4 * stage;
                let spec = LayerSpec::residual(shape, out_c, 3, (stage * 2 + block) as u64);
                shape = spec.out_shape;
                layers.push(spec);
            }
        }
        let spec = ModelSpec {
            model_index: 1,
            input_shape: input,
            n_classes: 4,
            exemplars_per_class: 2,
            family: SyntheticFamily::GaussianBlobs,
            seed: 1,
            layers,
        };
        let model = segment_model(&spec).unwrap();
        assert_eq!(model.depth(), 9);
        assert_eq!(
            model.lunits.iter().filter(|u| u.kind == UnitKind::ResidualBlock).count(),
            8
        );
    }

    #[test]
    fn broken_chain_is_a_segmentation_error() {
        let mut spec = plain_conv_spec(4);
        // Declare layer 3's input with the wrong channel count.
        spec.layers[3].in_shape = TensorShape::new(99, 8, 8);
        match segment_model(&spec) {
            Err(Error::Segmentation(msg)) => assert!(msg.contains("chain"), "{msg}"),
            other => panic!("expected SegmentationError, got {other:?}"),
        }
    }

    #[test]
    fn wrong_declared_output_is_a_segmentation_error() {
        let mut spec = plain_conv_spec(2);
        spec.layers[1].out_shape = TensorShape::new(5, 1, 1); // conv can't produce this
        assert!(matches!(segment_model(&spec), Err(Error::Segmentation(_))));
    }

    #[test]
    fn shapes_chain_through_forward() {
        let model = segment_model(&plain_conv_spec(4)).unwrap();
        let batch = crate::tensor::FeatureBatch::zeros(model.input_shape(), 2);
        let outs = model.forward_all(&batch).unwrap();
        for (unit, out) in model.lunits.iter().zip(&outs) {
            assert_eq!(out.shape(), unit.out_shape);
        }
    }

    #[test]
    fn same_spec_builds_identical_parameters() {
        let a = segment_model(&plain_conv_spec(4)).unwrap();
        let b = segment_model(&plain_conv_spec(4)).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }
}

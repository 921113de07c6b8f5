//! On-disk format for source models.
//!
//! A model is a JSON manifest (architecture, class structure, provenance)
//! next to a flat little-endian float32 blob holding all parameter arrays
//! and the exemplar batch. The manifest records each array's offset/length
//! in the blob plus a SHA-256 content hash, checked on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{FeatureBatch, TensorShape};
use crate::zoo::spec::LayerSpec;
use crate::zoo::{hex, LUnit, SourceModel, UnitId, UnitKind};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    /// Offset into the blob, in f32 units.
    offset: usize,
    /// Length, in f32 units.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    file: String,
    sha256: String,
    entries: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_index: usize,
    seed: u64,
    input_shape: TensorShape,
    classes: Vec<usize>,
    exemplar_labels: Vec<usize>,
    layers: Vec<LayerSpec>,
    blob: BlobInfo,
}

pub(crate) fn layer_spec_of(unit: &LUnit) -> LayerSpec {
    use crate::zoo::UnitLayers;
    let kernel = match &unit.layers {
        UnitLayers::ConvBlock { conv } => conv.kh.max(conv.kw),
        UnitLayers::Residual { conv1, .. } => conv1.kh.max(conv1.kw),
        UnitLayers::Pool { pool } => pool.kh.max(pool.kw),
        UnitLayers::Dense { .. } => 0,
    };
    LayerSpec { kind: unit.kind, in_shape: unit.in_shape, out_shape: unit.out_shape, kernel, seed: 0 }
}

fn blob_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Write `<stem>.json` and `<stem>.bin` under `dir`; returns the manifest
/// path and the blob's content hash.
pub fn save_source_model(model: &SourceModel, dir: &Path, stem: &str) -> Result<(PathBuf, String)> {
    let mut floats: Vec<f32> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, values: &[f64], floats: &mut Vec<f32>| {
        entries.push(BlobEntry { name, offset: floats.len(), len: values.len() });
        floats.extend(values.iter().map(|&v| v as f32));
    };
    for unit in &model.lunits {
        for (slot, values) in unit.param_slots() {
            push(format!("unit{}.{}", unit.id.depth, slot), values, &mut floats);
        }
    }
    push("exemplars".into(), model.exemplars.data(), &mut floats);

    let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
    let sha = blob_hash(&bytes);
    let blob_file = format!("{stem}.bin");
    fs::write(dir.join(&blob_file), &bytes)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_index: model.model_index,
        seed: model.seed,
        input_shape: model.input_shape(),
        classes: model.source_classes.clone(),
        exemplar_labels: model.exemplar_labels.clone(),
        layers: model.lunits.iter().map(layer_spec_of).collect(),
        blob: BlobInfo { file: blob_file, sha256: sha.clone(), entries },
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok((manifest_path, sha))
}

/// Load a model from its manifest path, verifying the blob content hash.
pub fn load_source_model(manifest_path: &Path) -> Result<SourceModel> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.blob.file))?;
    let got = blob_hash(&bytes);
    if got != manifest.blob.sha256 {
        return Err(Error::Integrity { expected: manifest.blob.sha256, got });
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Config("weight blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let read = |name: &str| -> Result<&[f64]> {
        let entry = manifest
            .blob
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("blob entry {name} missing from manifest")))?;
        floats.get(entry.offset..entry.offset + entry.len).ok_or_else(|| Error::Config(format!(
            "blob entry {name} escapes blob bounds"
        )))
    };

    let mut units = Vec::with_capacity(manifest.layers.len());
    for (j, layer) in manifest.layers.iter().enumerate() {
        let mut unit = build_unit_structure(layer, UnitId { model: manifest.model_index, depth: j })?;
        for (slot, values) in unit.param_slots_mut() {
            let stored = read(&format!("unit{j}.{slot}"))?;
            if stored.len() != values.len() {
                return Err(Error::Config(format!(
                    "blob entry unit{j}.{slot} has {} values, expected {}",
                    stored.len(),
                    values.len()
                )));
            }
            values.copy_from_slice(stored);
        }
        units.push(unit);
    }

    let exemplar_data = read("exemplars")?.to_vec();
    let exemplars = FeatureBatch::new(manifest.input_shape, exemplar_data)?;
    if exemplars.len() != manifest.exemplar_labels.len() {
        return Err(Error::Config(format!(
            "{} exemplars but {} labels",
            exemplars.len(),
            manifest.exemplar_labels.len()
        )));
    }
    Ok(SourceModel {
        model_index: manifest.model_index,
        lunits: units,
        source_classes: manifest.classes,
        exemplars,
        exemplar_labels: manifest.exemplar_labels,
        seed: manifest.seed,
    })
}

/// Rebuild a unit's operator structure (zero weights) from its spec line.
pub(crate) fn build_unit_structure(layer: &LayerSpec, id: UnitId) -> Result<LUnit> {
    use crate::ops::{AvgPool2d, Conv2d, Dense};
    use crate::zoo::UnitLayers;
    let layers = match layer.kind {
        UnitKind::ConvBlock => UnitLayers::ConvBlock {
            conv: Conv2d::same(layer.in_shape.channels, layer.out_shape.channels, layer.kernel, layer.in_shape),
        },
        UnitKind::ResidualBlock => {
            let out_c = layer.out_shape.channels;
            let conv1 = Conv2d::same(layer.in_shape.channels, out_c, layer.kernel, layer.in_shape);
            let mid = TensorShape::new(out_c, layer.in_shape.height, layer.in_shape.width);
            let conv2 = Conv2d::same(out_c, out_c, layer.kernel, mid);
            let proj = (layer.in_shape.channels != out_c)
                .then(|| Conv2d::new(layer.in_shape.channels, out_c, 1, 1, 1, 0, 0));
            UnitLayers::Residual { conv1, conv2, proj }
        }
        UnitKind::Pool => UnitLayers::Pool { pool: AvgPool2d::clamped(layer.kernel, layer.in_shape) },
        UnitKind::Dense => UnitLayers::Dense {
            dense: Dense::new(layer.in_shape.elements(), layer.out_shape.channels),
        },
    };
    LUnit::from_layers(id, layers, layer.in_shape)
}

/// Quantize all parameters and exemplars through f32, in place, so the
/// in-memory model round-trips the on-disk format exactly.
pub(crate) fn quantize_model(model: &mut SourceModel) {
    for unit in &mut model.lunits {
        for (_, values) in unit.param_slots_mut() {
            crate::tensor::quantize_f32(values);
        }
    }
    crate::tensor::quantize_f32(model.exemplars.data_mut());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::generate_synthetic_source;

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_synthetic_source(5, 4, TensorShape::new(3, 16, 16), 3).unwrap();
        let (path, sha) = save_source_model(&model, dir.path(), "m0").unwrap();
        let loaded = load_source_model(&path).unwrap();
        assert_eq!(loaded.param_hash(), model.param_hash());
        assert_eq!(loaded.exemplar_labels, model.exemplar_labels);
        assert_eq!(loaded.model_index, model.model_index);
        assert!(!sha.is_empty());
        // A second save of the loaded model reproduces the same content hash.
        let dir2 = tempfile::tempdir().unwrap();
        let (_, sha2) = save_source_model(&loaded, dir2.path(), "m0").unwrap();
        assert_eq!(sha, sha2);
    }

    #[test]
    fn exact_float_round_trip_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = generate_synthetic_source(6, 4, TensorShape::new(3, 8, 8), 2).unwrap();
        quantize_model(&mut model);
        let (path, _) = save_source_model(&model, dir.path(), "m").unwrap();
        let loaded = load_source_model(&path).unwrap();
        for (a, b) in model.lunits.iter().zip(&loaded.lunits) {
            assert_eq!(a.params_flat(), b.params_flat());
        }
        assert_eq!(model.exemplars.data(), loaded.exemplars.data());
    }

    #[test]
    fn corrupt_blob_fails_integrity_check() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_synthetic_source(7, 4, TensorShape::new(3, 8, 8), 2).unwrap();
        let (path, _) = save_source_model(&model, dir.path(), "m").unwrap();
        let blob_path = dir.path().join("m.bin");
        let mut bytes = fs::read(&blob_path).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(&blob_path, &bytes).unwrap();
        assert!(matches!(load_source_model(&path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn missing_blob_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_synthetic_source(8, 4, TensorShape::new(3, 8, 8), 2).unwrap();
        let (path, _) = save_source_model(&model, dir.path(), "m").unwrap();
        fs::remove_file(dir.path().join("m.bin")).unwrap();
        assert!(matches!(load_source_model(&path), Err(Error::Io(_))));
    }
}

//! On-disk format for recombined models.
//!
//! Mirrors the source-model format: a JSON manifest describing the layer
//! chain (frozen unit specs, connector shapes, channel masks, provenance)
//! next to a little-endian float32 blob holding every parameter array, with
//! the manifest carrying each array's offset/length and a SHA-256 content
//! hash. Frozen-unit parameter hashes are recorded and re-checked on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lws::model::Provenance;
use crate::lws::{RecombinedLayer, RecombinedModel};
use crate::ops::Dense;
use crate::srr::connector::connector_structure;
use crate::srr::ChannelMask;
use crate::tensor::TensorShape;
use crate::zoo::manifest::{build_unit_structure, layer_spec_of};
use crate::zoo::{hex, LayerSpec, UnitId};

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
struct ConnectorSpec {
    target_shape: TensorShape,
    expected_shape: TensorShape,
    bottleneck: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    unit_id: UnitId,
    unit_spec: LayerSpec,
    /// SHA-256 of the frozen unit's parameters, re-checked on load.
    unit_param_hash: String,
    connector: ConnectorSpec,
    channel_mask: Option<ChannelMask>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    input_shape: TensorShape,
    provenance: Provenance,
    layers: Vec<LayerManifest>,
    head_classes: Option<usize>,
    blob: BlobInfo,
}

fn blob_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Write `<stem>.json` and `<stem>.bin` under `dir`; returns the manifest
/// path and the blob's content hash.
pub fn save_recombined_model(
    model: &RecombinedModel,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, String)> {
    let mut floats: Vec<f32> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, values: &[f64], floats: &mut Vec<f32>| {
        entries.push(BlobEntry { name, offset: floats.len(), len: values.len() });
        floats.extend(values.iter().map(|&v| v as f32));
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        for (slot, values) in layer.unit.param_slots() {
            push(format!("layer{i}.unit.{slot}"), values, &mut floats);
        }
        for (slot, values) in layer.connector.param_slots() {
            push(format!("layer{i}.connector.{slot}"), values, &mut floats);
        }
        layers.push(LayerManifest {
            unit_id: layer.unit.id,
            unit_spec: layer_spec_of(&layer.unit),
            unit_param_hash: layer.unit.param_hash(),
            connector: ConnectorSpec {
                target_shape: layer.connector.target_shape,
                expected_shape: layer.connector.expected_shape,
                bottleneck: layer.connector.encoder.out_c,
            },
            channel_mask: layer.channel_mask.clone(),
        });
    }
    if let Some(head) = &model.head {
        push("head.weight".into(), &head.weight, &mut floats);
        push("head.bias".into(), &head.bias, &mut floats);
    }

    let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
    let sha = blob_hash(&bytes);
    let blob_file = format!("{stem}.bin");
    fs::write(dir.join(&blob_file), &bytes)?;

    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape,
        provenance: model.provenance.clone(),
        layers,
        head_classes: model.head.as_ref().map(|h| h.out_features),
        blob: BlobInfo { file: blob_file, sha256: sha.clone(), entries },
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok((manifest_path, sha))
}

/// Load a recombined model from its manifest path, verifying the blob
/// content hash and every frozen unit's parameter hash.
pub fn load_recombined_model(manifest_path: &Path) -> Result<RecombinedModel> {
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
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
        floats.get(entry.offset..entry.offset + entry.len).ok_or_else(|| {
            Error::Config(format!("blob entry {name} escapes blob bounds"))
        })
    };
    let fill = |name: &str, slot: &mut Vec<f64>| -> Result<()> {
        let stored = read(name)?;
        if stored.len() != slot.len() {
            return Err(Error::Config(format!(
                "blob entry {name} has {} values, expected {}",
                stored.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(stored);
        Ok(())
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let mut unit = build_unit_structure(&entry.unit_spec, entry.unit_id)?;
        for (slot, values) in unit.param_slots_mut() {
            fill(&format!("layer{i}.unit.{slot}"), values)?;
        }
        let unit_hash = unit.param_hash();
        if unit_hash != entry.unit_param_hash {
            return Err(Error::Integrity {
                expected: entry.unit_param_hash.clone(),
                got: unit_hash,
            });
        }
        let mut connector = connector_structure(
            entry.connector.target_shape,
            entry.connector.expected_shape,
            entry.connector.bottleneck,
        );
        for (slot, values) in connector.param_slots_mut() {
            fill(&format!("layer{i}.connector.{slot}"), values)?;
        }
        layers.push(RecombinedLayer {
            unit,
            connector,
            channel_mask: entry.channel_mask.clone(),
        });
    }

    let mut model =
        RecombinedModel::new(manifest.input_shape, layers, manifest.provenance)?;
    if let Some(classes) = manifest.head_classes {
        let feature_dim = model
            .layers
            .last()
            .map(RecombinedLayer::out_shape)
            .expect("model has layers")
            .channels;
        let mut head = Dense::new(feature_dim, classes);
        fill("head.weight", &mut head.weight)?;
        fill("head.bias", &mut head.bias)?;
        model.head = Some(head);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lws::pipeline::{build_anchor_spaces, run_search, PipelineConfig};
    use crate::lws::{FinetuneConfig, SearchConfig};
    use crate::srr::TrainConfig;
    use crate::tensor::FeatureBatch;
    use crate::zoo::generate_synthetic_source_indexed;

    fn searched_model() -> RecombinedModel {
        let zoo = vec![
            generate_synthetic_source_indexed(41, 6, TensorShape::new(3, 12, 12), 3, 0).unwrap(),
        ];
        let cfg = PipelineConfig {
            search: SearchConfig { budget: 3.0, search_depth: 2 },
            train: TrainConfig { episodes: 10, ..TrainConfig::default() },
            finetune: FinetuneConfig { epochs: 3, ..FinetuneConfig::default() },
            ..PipelineConfig::default()
        };
        let spaces = build_anchor_spaces(&zoo, cfg.pca_components).unwrap();
        let shape = TensorShape::new(2, 1, 16);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for i in 0..4usize {
                for c in 0..shape.channels {
                    for t in 0..shape.width {
                        let ramp = (t as f64 / 15.0) * (1.0 + class as f64 + 0.5 * c as f64);
                        data.push(ramp + 0.01 * ((i * 7 + t) % 5) as f64);
                    }
                }
                labels.push(class);
            }
        }
        let support = FeatureBatch::new(shape, data).unwrap();
        let mut run = run_search(&zoo, &spaces, &support, &labels, &cfg, 9).unwrap();
        run.model.quantize_trainable();
        run.model
    }

    #[test]
    fn save_load_round_trip_preserves_predictions() {
        let model = searched_model();
        let dir = tempfile::tempdir().unwrap();
        let (path, sha) = save_recombined_model(&model, dir.path(), "model").unwrap();
        let loaded = load_recombined_model(&path).unwrap();
        assert_eq!(loaded.unit_hashes(), model.unit_hashes());
        assert_eq!(loaded.provenance.run_seed, model.provenance.run_seed);
        let probe = FeatureBatch::new(
            model.input_shape,
            (0..2 * model.input_shape.elements()).map(|i| (i % 13) as f64 * 0.1).collect(),
        )
        .unwrap();
        assert_eq!(loaded.predict(&probe).unwrap(), model.predict(&probe).unwrap());
        assert_eq!(
            loaded.logits(&probe).unwrap().data(),
            model.logits(&probe).unwrap().data(),
            "quantized parameters must round-trip exactly"
        );
        assert!(!sha.is_empty());
        let dir2 = tempfile::tempdir().unwrap();
        let (_, sha2) = save_recombined_model(&loaded, dir2.path(), "model").unwrap();
        assert_eq!(sha, sha2);
    }

    #[test]
    fn corrupt_blob_fails_integrity_check() {
        let model = searched_model();
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = save_recombined_model(&model, dir.path(), "model").unwrap();
        let blob = dir.path().join("model.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[4] ^= 0xFF;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_recombined_model(&path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn missing_blob_is_io_error() {
        let model = searched_model();
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = save_recombined_model(&model, dir.path(), "model").unwrap();
        fs::remove_file(dir.path().join("model.bin")).unwrap();
        assert!(matches!(load_recombined_model(&path), Err(Error::Io(_))));
    }
}

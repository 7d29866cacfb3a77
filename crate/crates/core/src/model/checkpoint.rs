//! Checkpoint directories: `manifest.json` plus one binary tensor file per
//! parameter or buffer under `tensors/`.
//!
//! The manifest lists every layer with its kind, hyperparameters and tensor
//! files (shape and SHA-256), together with the model spec and freeze mask
//! needed to rebuild the network.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneSpec, FreezeMask, GtnModel, ModelSpec};
use crate::error::{Error, Result, ResultExt};
use crate::files::{read_json, read_verified, sha256_hex, write_bytes, write_json};
use crate::tensor::{Rng, Tensor};

pub const CHECKPOINT_FORMAT: &str = "gtn-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    pub hyper: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub variant: String,
    pub spec: ModelSpec,
    pub freeze: FreezeMask,
    pub layers: Vec<LayerEntry>,
    /// Free-form run information (epoch, accuracy, seed).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn save_checkpoint(model: &GtnModel, dir: &Path, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let mut layers = Vec::new();
    for (layer_name, layer) in model.layers() {
        let mut tensors = Vec::new();
        let named: Vec<(String, &Tensor)> = layer
            .params()
            .into_iter()
            .map(|(n, p)| (n, &p.value))
            .chain(layer.buffers())
            .collect();
        for (name, t) in named {
            let file = format!("tensors/{layer_name}.{name}.bin");
            let bytes = t.to_bytes();
            write_bytes(&dir.join(&file), &bytes)?;
            tensors.push(TensorEntry {
                name,
                file,
                shape: t.shape().to_vec(),
                sha256: sha256_hex(&bytes),
            });
        }
        layers.push(LayerEntry {
            name: layer_name,
            kind: layer.kind().to_string(),
            hyper: layer.hyper(),
            tensors,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        variant: model.variant_name().into(),
        spec: model.spec().clone(),
        freeze: model.freeze_mask(),
        layers,
        metadata,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format '{}'",
            dir.display(),
            m.format
        )));
    }
    Ok(m)
}

fn read_tensors(dir: &Path, manifest: &CheckpointManifest, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for layer in &manifest.layers {
        for entry in &layer.tensors {
            let full = format!("{}.{}", layer.name, entry.name);
            let Some(key) = full.strip_prefix(prefix) else {
                continue;
            };
            let bytes = read_verified(&dir.join(&entry.file), &entry.sha256)?;
            let t = Tensor::from_bytes(&bytes).with_context(|| format!("tensor '{full}'"))?;
            if t.shape() != entry.shape {
                return Err(Error::Format(format!(
                    "tensor '{full}' has shape {:?} but the manifest says {:?}",
                    t.shape(),
                    entry.shape
                )));
            }
            out.insert(key.to_string(), t);
        }
    }
    Ok(out)
}

/// Rebuilds the saved model bit-exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(GtnModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = GtnModel::new(manifest.spec.clone(), &Rng::new(0))
        .with_context(|| format!("checkpoint {}", dir.display()))?;
    let expected: Vec<(String, &str)> = model.layers().into_iter().map(|(n, l)| (n, l.kind())).collect();
    let found: Vec<(String, &str)> = manifest
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.kind.as_str()))
        .collect();
    if expected != found {
        return Err(Error::Incompatible(format!(
            "{}: layer list {found:?} does not match the spec's {expected:?}",
            dir.display()
        )));
    }
    model.load_state(&read_tensors(dir, &manifest, "")?)?;
    model.set_backbone_frozen(manifest.freeze.backbone);
    Ok((model, manifest))
}

/// Loads only the backbone, which must match `expected` exactly.
pub fn load_backbone(dir: &Path, expected: &BackboneSpec, aux_tap: usize) -> Result<Backbone> {
    let manifest = read_manifest(dir)?;
    if &manifest.spec.backbone != expected || manifest.spec.aux_tap != aux_tap {
        return Err(Error::Incompatible(format!(
            "{}: checkpoint backbone {:?} (aux_tap {}) does not match the configured {:?} (aux_tap {aux_tap})",
            dir.display(),
            manifest.spec.backbone,
            manifest.spec.aux_tap,
            expected
        )));
    }
    let mut backbone = Backbone::new(expected.clone(), aux_tap, &Rng::new(0))?;
    backbone.load_state(&read_tensors(dir, &manifest, "backbone.")?)?;
    Ok(backbone)
}

//! Checkpoints: `checkpoint.gltd` holds concatenated GLTD records (student
//! parameters, teacher parameters, both centres, step) and `checkpoint.json` names
//! them with byte offsets, shapes and a hash of the run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ModelState, Params};
use crate::numerics::{gltd, Tensor};

pub const TENSORS_FILE: &str = "checkpoint.gltd";
pub const MANIFEST_FILE: &str = "checkpoint.json";
const FORMAT: &str = "glsd-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub config_hash: String,
    pub backbone: BackboneConfig,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of `key=value` lines in key order.
pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in config {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises `state`; returns the tensor bytes and the manifest.
pub fn encode(state: &ModelState, config: &BTreeMap<String, String>) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor, bytes: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        gltd::encode_into(t, bytes);
    };
    for (role, params) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (n, t) in params.names().iter().zip(params.tensors()) {
            push(format!("{role}.{n}"), t, &mut bytes);
        }
    }
    push(
        "center".into(),
        &Tensor::from_parts(vec![state.center.len()], state.center.clone()),
        &mut bytes,
    );
    push(
        "local_center".into(),
        &Tensor::from_parts(vec![state.local_center.len()], state.local_center.clone()),
        &mut bytes,
    );
    push("step".into(), &Tensor::scalar(state.step as f64), &mut bytes);
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        config_hash: config_hash(config),
        backbone: state.config.clone(),
        config: config.clone(),
        tensors,
    };
    (bytes, manifest)
}

pub fn save(dir: &Path, state: &ModelState, config: &BTreeMap<String, String>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, manifest) = encode(state, config);
    let path = dir.join(TENSORS_FILE);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a state from tensor bytes and a manifest.
pub fn decode(bytes: &[u8], manifest: &Manifest) -> Result<ModelState> {
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    let records = gltd::read_all(bytes)?;
    if records.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, file holds {}",
            manifest.tensors.len(),
            records.len()
        )));
    }
    let mut student = Vec::new();
    let mut teacher = Vec::new();
    let mut center = None;
    let mut local_center = None;
    let mut step = None;
    for (entry, t) in manifest.tensors.iter().zip(records) {
        if entry.shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        if let Some(n) = entry.name.strip_prefix("student.") {
            student.push((n.to_string(), t));
        } else if let Some(n) = entry.name.strip_prefix("teacher.") {
            teacher.push((n.to_string(), t));
        } else if entry.name == "center" {
            center = Some(t.into_data());
        } else if entry.name == "local_center" {
            local_center = Some(t.into_data());
        } else if entry.name == "step" {
            step = t.item();
        } else {
            return Err(Error::Format(format!("unexpected tensor {}", entry.name)));
        }
    }
    let student = Params::from_entries(student);
    let teacher = Params::from_entries(teacher);
    student.check_layout(&manifest.backbone)?;
    teacher.check_layout(&manifest.backbone)?;
    let center = center.ok_or_else(|| Error::Format("checkpoint has no center".into()))?;
    let local_center = local_center.ok_or_else(|| Error::Format("checkpoint has no local_center".into()))?;
    if center.len() != manifest.backbone.prototypes || local_center.len() != manifest.backbone.prototypes {
        return Err(Error::Format("center length does not match the prototype count".into()));
    }
    let step = step.ok_or_else(|| Error::Format("checkpoint has no step".into()))? as u64;
    Ok(ModelState {
        config: manifest.backbone.clone(),
        student,
        teacher,
        center,
        local_center,
        step,
    })
}

pub fn load(dir: &Path) -> Result<(ModelState, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let path = dir.join(TENSORS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok((decode(&bytes, &manifest)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockKind;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            patch: 4,
            dim: 4,
            depth: 1,
            block: BlockKind::MeanMix,
            mlp_hidden: 4,
            pos_embed: false,
            head_hidden: 4,
            head_bottleneck: 4,
            prototypes: 6,
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = ModelState::init(tiny(), 1).unwrap();
        state.center = vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.25];
        state.local_center = vec![0.0, 0.5, -0.5, 1.0, 0.0, 0.125];
        state.step = 17;
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_string(), "1".to_string());
        save(dir.path(), &state, &cfg).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(back, state);
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.config_hash, config_hash(&cfg));
        assert_eq!(manifest.tensors[0].offset, 0);
    }

    #[test]
    fn hash_depends_on_values() {
        let mut a = BTreeMap::new();
        a.insert("seed".to_string(), "1".to_string());
        let mut b = a.clone();
        b.insert("seed".to_string(), "2".to_string());
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let state = ModelState::init(tiny(), 1).unwrap();
        let (bytes, mut manifest) = encode(&state, &BTreeMap::new());
        manifest.backbone.prototypes = 7;
        assert!(decode(&bytes, &manifest).is_err());
    }
}

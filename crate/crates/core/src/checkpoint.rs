//! Versioned model checkpoints: config echo, seed, parameter blobs and a
//! content hash over the blobs.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Little-endian f64 values, base64 encoded.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// Run configuration that produced the checkpoint.
    pub run_config: serde_json::Value,
    pub epoch: Option<usize>,
    pub params: Vec<ParamBlob>,
    /// sha256 of `"blob <len>\0"` followed by the concatenated raw bytes.
    pub hash: String,
}

fn content_hash(raw: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", raw.len()).as_bytes());
    h.update(raw);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, run_config: serde_json::Value, epoch: Option<usize>) -> Self {
        let mut raw = Vec::new();
        let params = model
            .store
            .iter()
            .map(|(name, m)| {
                let bytes: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                raw.extend_from_slice(&bytes);
                ParamBlob { name: name.to_string(), rows: m.rows, cols: m.cols, data: STANDARD.encode(&bytes) }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.cfg.clone(),
            seed: model.cfg.seed,
            run_config,
            epoch,
            params,
            hash: content_hash(&raw),
        }
    }

    /// Rebuilds the model and loads the stored parameters, checking shapes,
    /// names and the content hash.
    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: self.version, expected: CHECKPOINT_VERSION });
        }
        let mut model = build_model(&self.model)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let mut raw = Vec::new();
        let mut decoded = Vec::with_capacity(self.params.len());
        for (blob, (name, m)) in self.params.iter().zip(model.store.iter()) {
            if blob.name != name || blob.rows != m.rows || blob.cols != m.cols {
                return Err(Error::Data(format!(
                    "parameter `{}` {}x{} does not match model `{name}` {}x{}",
                    blob.name, blob.rows, blob.cols, m.rows, m.cols
                )));
            }
            let bytes = STANDARD.decode(&blob.data).map_err(|e| Error::Data(format!("parameter `{name}`: {e}")))?;
            if bytes.len() != 8 * m.len() {
                return Err(Error::Data(format!("parameter `{name}` has {} bytes", bytes.len())));
            }
            raw.extend_from_slice(&bytes);
            decoded.push(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
        }
        if content_hash(&raw) != self.hash {
            return Err(Error::Data("checkpoint content hash mismatch".into()));
        }
        for (m, values) in model.store.values_mut().iter_mut().zip(decoded) {
            m.data = values;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Family};
    use crate::pose_encoder::PoseEncoderConfig;

    fn small() -> ModelConfig {
        let b = BackboneConfig { family: Family::Mlp, traj_embed_dim: 8, hidden_dim: 8, interaction_dim: 8, ..Default::default() };
        let p = PoseEncoderConfig { dim: 8, n_layers: 1, n_heads: 2, ff_hidden: 8, ..Default::default() };
        ModelConfig::new(b, Some(p), 3)
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = build_model(&small()).unwrap();
        model.store.values_mut()[0].data[0] = 0.1 + 0.2;
        let ck = Checkpoint::from_model(&model, serde_json::json!({"seed": 3}), Some(2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().store, model.store);
    }

    #[test]
    fn tampering_is_detected() {
        let model = build_model(&small()).unwrap();
        let mut ck = Checkpoint::from_model(&model, serde_json::Value::Null, None);
        let mut other = ck.clone();
        other.params[0].data = STANDARD.encode(vec![0u8; 8 * model.store.values()[0].len()]);
        assert!(matches!(other.to_model(), Err(Error::Data(_))));
        ck.version = 9;
        assert!(matches!(ck.to_model(), Err(Error::Version { .. })));
    }
}

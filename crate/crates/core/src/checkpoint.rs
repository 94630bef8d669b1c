//! Single-file checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u64` manifest length, the JSON
//! manifest, then the payload. For every entry in manifest order the payload
//! holds its values as 32-bit little-endian floats, followed by its momentum
//! buffer when `velocity` is set. The manifest records the payload length and
//! its SHA-256 digest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CheckpointError, Result};
use crate::fusion::Modality;
use crate::model::{FusionModel, ModelShape};
use crate::numerics::{DenseArray, ParamStore};

pub const MAGIC: &[u8; 8] = b"DMFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Position of the batch-sampling generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub decay: bool,
    pub velocity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub iteration: usize,
    pub total_iterations: usize,
    pub modalities: Vec<Modality>,
    pub config: RunConfig,
    pub rng: RngState,
    /// Identity id of each classifier output, in order.
    pub classes: Vec<u32>,
    pub shape: ModelShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    entries: Vec<EntryMeta>,
    payload_bytes: usize,
    payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    /// Serialized bytes. Values are narrowed to 32-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for e in self.params.iter() {
            push_f32(&mut payload, e.value.data());
            if e.trainable {
                push_f32(&mut payload, e.velocity.data());
            }
            entries.push(EntryMeta {
                path: e.path.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                decay: e.decay,
                velocity: e.trainable,
            });
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            entries,
            payload_bytes: payload.len(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(CheckpointError::Truncated {
                expected: json_len,
                found: bytes.len().saturating_sub(16),
            })?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let payload = &bytes[json_end..];
        if payload.len() != manifest.payload_bytes {
            return Err(CheckpointError::Truncated {
                expected: manifest.payload_bytes,
                found: payload.len(),
            });
        }
        let digest = hex(&Sha256::digest(payload));
        if digest != manifest.payload_sha256 {
            return Err(CheckpointError::Digest {
                expected: manifest.payload_sha256,
                found: digest,
            });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut take = |n: usize| -> std::result::Result<Vec<f64>, CheckpointError> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(CheckpointError::Truncated {
                    expected: manifest.payload_bytes,
                    found: payload.len(),
                })
            }
        };
        let mut params = ParamStore::new();
        for e in &manifest.entries {
            let n: usize = e.shape.iter().product();
            let value = DenseArray::from_vec(&e.shape, take(n)?).map_err(|err| CheckpointError::Manifest(err.to_string()))?;
            let id = params
                .insert(e.path.clone(), value, e.trainable, e.decay)
                .map_err(|err| CheckpointError::Manifest(err.to_string()))?;
            if e.velocity {
                let v = take(n)?;
                params.entry_mut(id).velocity.data_mut().copy_from_slice(&v);
            }
        }
        Ok(Self {
            meta: manifest.meta,
            params,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |p: &Path, e| CheckpointError::Io {
            path: p.to_path_buf(),
            source: e,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let tmp = temp_path(path);
        {
            let mut f = fs::File::create(&tmp).map_err(|e| io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| io(&tmp, e))?;
            f.sync_all().map_err(|e| io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Checks every parameter against the model the stored configuration
    /// describes, or against `model` when given.
    pub fn validate_against(&self, model: Option<&crate::model::ModelConfig>) -> Result<FusionModel> {
        let cfg = model.unwrap_or(&self.meta.config.model);
        let specs = FusionModel::param_specs(cfg, &self.meta.shape)?;
        for spec in &specs {
            let e = self.params.by_path(&spec.path).ok_or_else(|| CheckpointError::MissingParameter {
                path: spec.path.clone(),
            })?;
            if e.value.shape() != spec.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    path: spec.path.clone(),
                    expected: spec.shape.clone(),
                    found: e.value.shape().to_vec(),
                }
                .into());
            }
        }
        if let Some(extra) = self.params.paths().find(|p| !specs.iter().any(|s| s.path == *p)) {
            return Err(CheckpointError::UnexpectedParameter { path: extra.to_string() }.into());
        }
        FusionModel::bind(cfg, &self.meta.shape, &self.params)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn id(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

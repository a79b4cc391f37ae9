//! Checkpoint container: `"CAMC"`, a version byte, a `u64` little-endian
//! manifest length, a JSON manifest, then the tensor blobs (each a CAMT
//! encoding) back to back. The manifest lists every blob with its offset
//! into the blob area, length and SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::swa::SwaState;
use crate::error::{Error, Result};
use crate::features::camt::{decode, encode, Dtype};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::numeric::{AdamConfig, AdamState, RngState, Tensor};

pub const MAGIC: &[u8; 4] = b"CAMC";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: ModelParams,
    pub adam: AdamState,
    pub swa: Option<SwaState>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct SwaManifest {
    count: u64,
    start: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    spec: ModelSpec,
    epoch: usize,
    rng: RngState,
    adam_config: AdamConfig,
    adam_t: u64,
    swa: Option<SwaManifest>,
    param_names: Vec<String>,
    tensors: Vec<BlobEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.spec.clone(), self.params.clone())
    }

    /// Model carrying the averaged weights, when any were absorbed.
    pub fn swa_model(&self) -> Result<Option<Model>> {
        match &self.swa {
            Some(s) if !s.is_empty() => {
                let params = ModelParams { names: self.params.names.clone(), tensors: s.mean.clone() };
                Ok(Some(Model::with_params(self.spec.clone(), params)?))
            }
            _ => Ok(None),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = &self.params.names;
        let mut groups: Vec<(&str, &[Tensor])> = vec![
            ("param", &self.params.tensors),
            ("adam.m", &self.adam.m),
            ("adam.v", &self.adam.v),
        ];
        if let Some(s) = self.swa.as_ref().filter(|s| !s.is_empty()) {
            groups.push(("swa", &s.mean));
        }
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (prefix, tensors) in groups {
            if tensors.len() != names.len() {
                return Err(bad(format!("{prefix}: {} tensors for {} parameters", tensors.len(), names.len())));
            }
            for (name, t) in names.iter().zip(tensors) {
                let bytes = encode(t, Dtype::F64);
                entries.push(BlobEntry {
                    name: format!("{prefix}/{name}"),
                    offset: blob.len() as u64,
                    len: bytes.len() as u64,
                    sha256: hex(&Sha256::digest(&bytes)),
                });
                blob.extend_from_slice(&bytes);
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            spec: self.spec.clone(),
            epoch: self.epoch,
            rng: self.rng,
            adam_config: self.adam.config,
            adam_t: self.adam.t,
            swa: self.swa.as_ref().map(|s| SwaManifest { count: s.count, start: s.start }),
            param_names: names.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(13 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let json_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let blob_start = 13usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[13..blob_start]).map_err(|e| bad(format!("manifest: {e}")))?;
        let blob = &bytes[blob_start..];

        let mut end = 0u64;
        let mut read = |entry: &BlobEntry| -> Result<Tensor> {
            if entry.offset != end {
                return Err(bad(format!("{}: blobs out of order", entry.name)));
            }
            end = entry.offset + entry.len;
            let slice = blob
                .get(entry.offset as usize..end as usize)
                .ok_or_else(|| bad(format!("{}: truncated", entry.name)))?;
            if hex(&Sha256::digest(slice)) != entry.sha256 {
                return Err(bad(format!("{}: checksum mismatch", entry.name)));
            }
            let (t, dtype) = decode(slice)?;
            if dtype != Dtype::F64 {
                return Err(bad(format!("{}: expected 64-bit payload", entry.name)));
            }
            Ok(t)
        };

        let names = &manifest.param_names;
        let n = names.len();
        let groups = if manifest.swa.as_ref().is_some_and(|s| s.count > 0) { 4 } else { 3 };
        if manifest.tensors.len() != groups * n {
            return Err(bad(format!("{} blobs for {} parameters", manifest.tensors.len(), n)));
        }
        let prefixes = ["param", "adam.m", "adam.v", "swa"];
        let mut loaded: Vec<Vec<Tensor>> = Vec::with_capacity(groups);
        for (g, chunk) in manifest.tensors.chunks(n.max(1)).enumerate().take(groups) {
            let mut tensors = Vec::with_capacity(n);
            for (entry, name) in chunk.iter().zip(names) {
                if entry.name != format!("{}/{name}", prefixes[g]) {
                    return Err(bad(format!("unexpected blob {}", entry.name)));
                }
                tensors.push(read(entry)?);
            }
            loaded.push(tensors);
        }
        if end as usize != blob.len() {
            return Err(bad("trailing bytes after the last blob"));
        }
        let mut loaded = loaded.into_iter();
        let params = ModelParams { names: names.clone(), tensors: loaded.next().unwrap_or_default() };
        let adam = AdamState {
            config: manifest.adam_config,
            m: loaded.next().unwrap_or_default(),
            v: loaded.next().unwrap_or_default(),
            t: manifest.adam_t,
        };
        let swa = manifest.swa.map(|s| SwaState {
            mean: if s.count > 0 { loaded.next().unwrap_or_default() } else { Vec::new() },
            count: s.count,
            start: s.start,
        });
        let ckpt = Checkpoint {
            config: manifest.config,
            spec: manifest.spec,
            epoch: manifest.epoch,
            rng: manifest.rng,
            params,
            adam,
            swa,
        };
        // shape check against the architecture
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

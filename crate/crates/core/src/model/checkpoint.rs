//! Portable checkpoint file: a text header line, a JSON manifest and one
//! little-endian f32 blob.
//!
//! ```text
//! swinsyn-checkpoint <manifest byte length>\n
//! <manifest JSON>
//! <blob: every tensor's f32 values back to back>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Modality;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "swinsyn-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Param,
    State,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub scenario: Option<Modality>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub blob_sha256: String,
}

/// Network weights plus any auxiliary state (optimizer moments) and metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub state: BTreeMap<String, Tensor<f32>>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ParameterStore) -> Self {
        Checkpoint {
            params,
            state: BTreeMap::new(),
            metadata: serde_json::Map::new(),
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let params = ckpt
        .params
        .iter()
        .map(|(k, v)| (k, &**v, TensorGroup::Param));
    let state = ckpt.state.iter().map(|(k, v)| (k, v, TensorGroup::State));
    for (name, tensor, group) in params.chain(state) {
        let offset = blob.len();
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            group,
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.params.config().clone(),
        scenario: ckpt.params.scenario(),
        metadata: ckpt.metadata.clone(),
        tensors: entries,
        blob_bytes: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{MAGIC} {}", json.len()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&blob).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(path, &bytes)?.0)
}

fn split<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Manifest, &'a [u8])> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..newline]).map_err(|_| corrupt("binary header".into()))?;
    let len: usize = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| corrupt(format!("unrecognized header {header:?}")))?;
    let body = &bytes[newline + 1..];
    if body.len() < len {
        return Err(corrupt("manifest truncated".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("manifest lacks format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| corrupt(format!("manifest: {e}")))?;
    Ok((manifest, &body[len..]))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, blob) = split(path, &bytes)?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if blob.len() != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(corrupt("blob checksum mismatch".into()));
    }
    let mut params = BTreeMap::new();
    let mut state = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(corrupt(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        let raw = entry
            .offset
            .checked_add(entry.bytes)
            .and_then(|end| blob.get(entry.offset..end))
            .filter(|raw| raw.len() == 4 * count)
            .ok_or_else(|| corrupt(format!("{}: byte range out of bounds", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        let target = match entry.group {
            TensorGroup::Param => &mut params,
            TensorGroup::State => &mut state,
        };
        if target.insert(entry.name.clone(), tensor).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", entry.name)));
        }
    }
    Ok(Checkpoint {
        params: ParameterStore::from_tensors(manifest.config, manifest.scenario, params)?,
        state,
        metadata: manifest.metadata,
    })
}

/// SHA-256 of the checkpoint file, hex encoded.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

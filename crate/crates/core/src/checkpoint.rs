//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `LWPTCKP1`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then every parameter as raw
//! little-endian `f64` values at the offsets the manifest lists (relative to
//! the start of the blob).

use std::fs;
use std::io::Write;
use std::path::Path;

use lwpt_autograd::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{LabelVocab, Layout, Vocab};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"LWPTCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub encoder: EncoderConfig,
    pub layout: Layout,
    pub vocab_hash: String,
    pub label_hash: String,
    pub vocab: Vocab,
    pub labels: LabelVocab,
    pub parameters: Vec<ParamEntry>,
    /// Free-form training record (loss history, best epoch, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub layout: Layout,
    pub vocab: Vocab,
    pub labels: LabelVocab,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut parameters = Vec::new();
        for (_, p) in self.model.params.iter() {
            let offset = blob.len() as u64;
            for v in p.value().data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            parameters.push(ParamEntry {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            encoder: self.model.config.clone(),
            layout: self.layout,
            vocab_hash: self.vocab.hash(),
            label_hash: self.labels.hash(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            parameters,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.vocab.hash() != manifest.vocab_hash || manifest.labels.hash() != manifest.label_hash {
            return Err(bad("vocabulary hash does not match its contents"));
        }
        if manifest.encoder.vocab_size != manifest.vocab.len() || manifest.encoder.num_labels != manifest.labels.len() {
            return Err(bad("encoder dimensions disagree with stored vocabularies"));
        }
        let blob = &bytes[16 + len..];
        let mut params = ParamSet::new();
        for e in &manifest.parameters {
            let count: usize = e.shape.iter().product();
            if e.byte_len as usize != count * 8 {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}`: {} bytes for shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let start = e.offset as usize;
            let raw = blob
                .get(start..start + e.byte_len as usize)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` lies outside the data blob", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        let model = Model::from_params(manifest.encoder, params)?;
        Ok(Checkpoint {
            stage: manifest.stage,
            model,
            layout: manifest.layout,
            vocab: manifest.vocab,
            labels: manifest.labels,
            extra: manifest.extra,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

//! Self-describing checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (format version, model config, counters, tensor directory), then the raw
//! little-endian `f64` tensor payload. Tensors are matched by name on load,
//! so files with extra tensors still load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams};
use crate::nn::Params;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RVSWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: usize,
    /// Free-form metadata (training config, optimizer counters, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, epoch: usize, step: usize) -> Self {
        let mut ck = Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model_config: params.config.clone(),
                epoch,
                step,
                extra: serde_json::Value::Null,
            },
            tensors: BTreeMap::new(),
        };
        ck.insert_params("", params);
        ck
    }

    pub fn insert_params(&mut self, prefix: &str, p: &impl Params) {
        p.visit(prefix, &mut |name, t| {
            self.tensors.insert(name, t.to_owned());
        });
    }

    /// Copies every tensor of `p` from the checkpoint, by name.
    pub fn load_into(&self, prefix: &str, p: &mut impl Params) -> Result<()> {
        let mut err = None;
        p.visit_mut(prefix, &mut |name, mut t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => t.assign(src),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn params(&self) -> Result<ModelParams> {
        let mut p = ModelParams::new(self.meta.model_config.clone(), 0)?;
        self.load_into("", &mut p)?;
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.meta.format_version > FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.meta.format_version)));
        }
        let data = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset * 8..(e.offset + len) * 8)
                .ok_or_else(|| bad(&format!("truncated tensor {}", e.name)))?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|err| bad(&err.to_string()))?;
            tensors.insert(e.name, arr);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a temporary file in the target directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes()?)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: vec![2, 4, 8],
            freq_bins: 32,
            time_frames: 24,
            se_reduction: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let p = ModelParams::new(tiny(), 4).unwrap();
        let mut ck = Checkpoint::new(&p, 3, 17);
        ck.meta.extra = serde_json::json!({"note": "x"});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("epoch_3.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn unknown_tensors_are_ignored_and_missing_ones_rejected() {
        let p = ModelParams::new(tiny(), 4).unwrap();
        let mut ck = Checkpoint::new(&p, 0, 0);
        ck.tensors.insert("future.thing".into(), ArrayD::zeros(IxDyn(&[3])));
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().params().unwrap(), p);
        ck.tensors.remove("generator.decoder.proj.bias");
        assert!(matches!(ck.params(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        assert!(matches!(Checkpoint::load("/nonexistent/x.ckpt"), Err(Error::MissingFile(_))));
    }
}

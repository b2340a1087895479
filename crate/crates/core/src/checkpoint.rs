//! Checkpoint container.
//!
//! Layout: the 8-byte magic `REGENCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then the raw
//! little-endian f32 data of every tensor in header order. The header names
//! each tensor with its shape and records the architecture settings of the
//! stored networks together with the hash of the creating config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REGENCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub phase: String,
    pub iteration: usize,
    pub config_hash: String,
    /// Fingerprint of the settings that produced this checkpoint.
    pub fingerprint: String,
    /// Architecture settings per stored network, keyed by network prefix.
    pub architecture: BTreeMap<String, Value>,
    /// Free-form scalars such as the running mIoU.
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(phase: &str, iteration: usize, config_hash: &str, fingerprint: &str) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                phase: phase.to_string(),
                iteration,
                config_hash: config_hash.to_string(),
                fingerprint: fingerprint.to_string(),
                architecture: BTreeMap::new(),
                metrics: BTreeMap::new(),
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    /// Stores every parameter of `params` under `prefix/name`.
    pub fn insert(&mut self, prefix: &str, architecture: Value, params: &ParamSet<f32>) {
        self.header.architecture.insert(prefix.to_string(), architecture);
        for p in params.iter() {
            self.header.tensors.push(TensorEntry {
                name: format!("{prefix}/{}", p.name),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                buffer: p.kind == ParamKind::Buffer,
            });
            self.data.push(p.value.data().to_vec());
        }
    }

    pub fn has(&self, prefix: &str) -> bool {
        self.header.architecture.contains_key(prefix)
    }

    pub fn architecture(&self, prefix: &str) -> Result<&Value> {
        self.header
            .architecture
            .get(prefix)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint holds no network `{prefix}`")))
    }

    /// Overwrites every parameter of `params` with the tensor stored under `prefix/name`.
    pub fn restore(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        let index: BTreeMap<&str, usize> =
            self.header.tensors.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();
        for i in 0..params.len() {
            let name = format!("{prefix}/{}", params.get(i).name);
            let &k = index
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor `{name}`")))?;
            let entry = &self.header.tensors[k];
            if entry.shape != params.value(i).shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint {:?} vs network {:?}",
                    entry.shape,
                    params.value(i).shape()
                )));
            }
            params.set_value(i, Tensor::from_vec(&entry.shape, self.data[k].clone()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.data.iter().map(|d| 4 * d.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut rest = &body[hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(bad(&format!("tensor `{}` has unsupported dtype {}", t.name, t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            if rest.len() < 4 * n {
                return Err(bad(&format!("truncated data for tensor `{}`", t.name)));
            }
            data.push(rest[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
            rest = &rest[4 * n..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

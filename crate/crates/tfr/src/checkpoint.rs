//! Named-tensor checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "TFRCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length N, u64 little-endian
//! 20      N     header, UTF-8 JSON (see `CheckpointHeader`)
//! 20+N    ...   tensor data, f32 little-endian, tensors back to back in
//!               header order
//! ```
//!
//! The header echoes the model configuration and grid, the normalization,
//! the hash of the run configuration, training metadata, and for each tensor
//! its name, shape and element offset into the data block.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tfr_core::images::Normalization;

use crate::dataset::write_file;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"TFRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Training progress stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    /// Epoch whose parameters were selected so far, with its score.
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub grid: [usize; 2],
    pub normalization: Normalization,
    pub config_hash: String,
    pub meta: TrainMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

pub const OPT_M: &str = "optimizer.m";
pub const OPT_V: &str = "optimizer.v";

impl Checkpoint {
    /// Model parameters plus any extra flat tensors (e.g. optimizer moments).
    pub fn new(
        model: &Model,
        params: &[f32],
        normalization: Normalization,
        config_hash: String,
        meta: TrainMeta,
        extra: &[(&str, &[f32])],
    ) -> Self {
        assert_eq!(params.len(), model.num_params());
        let mut tensors: Vec<TensorEntry> = model
            .layout()
            .entries
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset: e.slot.offset,
                len: e.slot.len,
            })
            .collect();
        let mut data = params.to_vec();
        for (name, values) in extra {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: vec![values.len()],
                offset: data.len(),
                len: values.len(),
            });
            data.extend_from_slice(values);
        }
        let (rows, cols) = model.shape();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                grid: [rows, cols],
                normalization,
                config_hash,
                meta,
                tensors,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..)
            .filter(|b| b.len() >= hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let raw = &body[hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("tensor block is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut expected = 0;
        for t in &header.tensors {
            if t.offset != expected || t.shape.iter().product::<usize>() != t.len {
                return Err(bad(&format!("tensor `{}` has an inconsistent index entry", t.name)));
            }
            expected += t.len;
        }
        if expected != data.len() {
            return Err(bad(&format!(
                "index lists {expected} values but the file holds {}",
                data.len()
            )));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        write_file(&tmp, &self.to_bytes())?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.len])
    }

    /// Rebuilds the model and extracts its parameters, checking that every
    /// tensor name and shape matches the architecture.
    pub fn restore(&self, path: &Path) -> Result<(Model, Vec<f32>)> {
        let [rows, cols] = self.header.grid;
        let model = Model::new(self.header.model.clone(), rows, cols)?;
        let mut params = vec![0.0f32; model.num_params()];
        for e in &model.layout().entries {
            let t = self
                .header
                .tensors
                .iter()
                .find(|t| t.name == e.name)
                .ok_or_else(|| Error::format(path, format!("missing tensor `{}`", e.name)))?;
            if t.shape != e.shape {
                return Err(Error::format(
                    path,
                    format!("tensor `{}` has shape {:?}, expected {:?}", e.name, t.shape, e.shape),
                ));
            }
            e.slot
                .get_mut(&mut params)
                .copy_from_slice(&self.data[t.offset..t.offset + t.len]);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite parameter values"));
        }
        Ok((model, params))
    }
}

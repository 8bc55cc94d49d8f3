//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `HABCKPT\0`, a little-endian `u32` header
//! length, a JSON header, then every tensor listed in the header as
//! row-major little-endian `f32`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderSpec, TinyEncoder};
use super::heads::{ClassifierHead, ProjectionHead};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HABCKPT\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder_spec: EncoderSpec,
    class_order: Vec<String>,
    taxonomy_ref: String,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Encoder weights plus optional classifier and projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: TinyEncoder,
    pub head: Option<ClassifierHead>,
    pub projection: Option<ProjectionHead>,
    pub class_order: Vec<String>,
    pub taxonomy_ref: String,
    /// Free-form provenance, typically the training config.
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut groups: Vec<(&str, &ParamStore)> = vec![("encoder", self.encoder.params())];
        if let Some(h) = &self.head {
            groups.push(("head", h.params()));
        }
        if let Some(p) = &self.projection {
            groups.push(("projection", p.params()));
        }
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (group, store) in &groups {
            for (name, value) in store.names().iter().zip(store.values()) {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    rows: value.nrows(),
                    cols: value.ncols(),
                });
                for x in value.iter() {
                    data.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            encoder_spec: self.encoder.spec().clone(),
            class_order: self.class_order.clone(),
            taxonomy_ref: self.taxonomy_ref.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut offset = 12 + len;
        let mut encoder = ParamStore::new();
        let mut head = ParamStore::new();
        let mut projection = ParamStore::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{}`", t.name)))?;
            offset += 4 * n;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let m = Array2::from_shape_vec((t.rows, t.cols), values).expect("sized above");
            match t.group.as_str() {
                "encoder" => encoder.push(t.name.clone(), m),
                "head" => head.push(t.name.clone(), m),
                "projection" => projection.push(t.name.clone(), m),
                other => return Err(Error::Checkpoint(format!("unknown tensor group `{other}`"))),
            };
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        let encoder = TinyEncoder::from_params(header.encoder_spec, encoder)?;
        let head = if head.is_empty() {
            None
        } else {
            let h = ClassifierHead::from_params(head, header.class_order.clone())?;
            if h.input_dim() != encoder.spec().embed_dim {
                return Err(Error::Checkpoint("head input does not match encoder width".into()));
            }
            Some(h)
        };
        let projection = if projection.is_empty() {
            None
        } else {
            Some(ProjectionHead::from_params(projection)?)
        };
        Ok(Checkpoint {
            encoder,
            head,
            projection,
            class_order: header.class_order,
            taxonomy_ref: header.taxonomy_ref,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The classifier head, or an error for encoder-only checkpoints.
    pub fn require_head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no classifier head".into()))
    }
}

//! Single-file tensor container shared by clips, reactions and checkpoints.
//!
//! Layout: one UTF-8 JSON header line terminated by `\n`, then the raw
//! little-endian `f32` row-major payload of every field, in header order.
//!
//! ```text
//! {"format":"reactdiff","version":1,"dtype":"f32le","kind":"clip","meta":{..},
//!  "fields":[{"name":"speaker.va","shape":[100,8]}, ...]}\n
//! <f32 payload of field 0><f32 payload of field 1>...
//! ```
//!
//! Values are narrowed to `f32` on write and widened back to `f64` on read.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_NAME: &str = "reactdiff";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FieldSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    kind: String,
    #[serde(default)]
    meta: Value,
    fields: Vec<FieldSpec>,
}

/// Decoded container: a kind tag, free-form metadata and ordered fields.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub fields: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self { kind: kind.into(), meta, fields: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.fields.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Field by name, or a format error naming it.
    pub fn require(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::format(0, format!("missing field `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dtype: DTYPE.into(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            fields: self
                .fields
                .iter()
                .map(|(n, t)| FieldSpec { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        let payload: usize = self.fields.iter().map(|(_, t)| t.numel() * 4).sum();
        out.reserve(payload);
        for (_, t) in &self.fields {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(bytes.len() as u64, "header line is not terminated"))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::format(e.column().saturating_sub(1) as u64, format!("malformed header: {e}")))?;
        if header.format != FORMAT_NAME {
            return Err(Error::format(0, format!("unknown format tag `{}`", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::format(
                0,
                format!("unsupported version {} (expected {FORMAT_VERSION})", header.version),
            ));
        }
        if header.dtype != DTYPE {
            return Err(Error::format(0, format!("unsupported dtype `{}`", header.dtype)));
        }
        let mut offset = newline + 1;
        let mut fields = Vec::with_capacity(header.fields.len());
        for spec in header.fields {
            let numel: usize = spec.shape.iter().product();
            let len = numel * 4;
            if bytes.len() < offset + len {
                return Err(Error::format(
                    offset as u64,
                    format!(
                        "payload for `{}` is short: need {len} bytes, {} remain",
                        spec.name,
                        bytes.len() - offset
                    ),
                ));
            }
            let data: Vec<f64> = bytes[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let tensor = Tensor::new(spec.shape, data)
                .map_err(|e| Error::format(offset as u64, format!("field `{}`: {e}", spec.name)))?;
            fields.push((spec.name, tensor));
            offset += len;
        }
        if offset != bytes.len() {
            return Err(Error::format(
                offset as u64,
                format!("{} trailing bytes after last field", bytes.len() - offset),
            ));
        }
        Ok(Self { kind: header.kind, meta: header.meta, fields })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

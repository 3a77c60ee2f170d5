//! Self-describing named-tensor container.
//!
//! Layout: the 8-byte magic `EDGEKIT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the raw little-endian `f64` payload. The header
//! carries free-form metadata plus one record per tensor
//! (`name`, `dtype`, `shape`, `offset`, `count`), offsets counted in values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EDGEKIT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<TensorRecord>,
}

pub fn encode(metadata: &Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
            count: t.len(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors: records,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not an edgekit tensor container".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        if rec.dtype != "f64" {
            return Err(Error::Format(format!("unsupported dtype {}", rec.dtype)));
        }
        let start = rec.offset * 8;
        let end = start + rec.count * 8;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {} is truncated", rec.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(rec.shape, data).map_err(|e| Error::Format(format!("tensor {}: {e}", rec.name)))?;
        tensors.push((rec.name, t));
    }
    Ok((header.metadata, tensors))
}

pub fn save(path: &Path, metadata: &Value, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(metadata, tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

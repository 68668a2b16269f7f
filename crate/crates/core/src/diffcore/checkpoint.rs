//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! header, then the raw payload. The header maps each tensor name to its
//! shape, dtype (always `"f64"`) and byte offset into the payload; values are
//! stored little-endian in row-major order. An optional free-form `metadata`
//! object rides along in the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "pgode-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct Header {
    format: String,
    version: u32,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

pub fn encode(tensors: &BTreeMap<String, Tensor>, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            },
        );
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        tensors: entries,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let payload = &bytes[8 + n..];
    let mut tensors = BTreeMap::new();
    for (name, e) in header.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("tensor {name}: dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 8 * count)
            .ok_or_else(|| bad(&format!("tensor {name} exceeds payload")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok((tensors, header.metadata))
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_offsets_follow_name_order() {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::vector(vec![1.0, 2.0]));
        m.insert("a".to_string(), Tensor::scalar(-3.5));
        let bytes = encode(&m, &serde_json::json!({"step": 4})).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["tensors"]["a"]["offset"], 0);
        assert_eq!(header["tensors"]["b"]["offset"], 8);
        assert_eq!(header["tensors"]["b"]["dtype"], "f64");
        assert_eq!(&bytes[8 + n..8 + n + 8], &(-3.5f64).to_le_bytes());

        let (back, meta) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["step"], 4);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::zeros(vec![3, 3]));
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
    }
}

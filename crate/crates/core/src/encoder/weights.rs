//! Weights blob: `PGWT` magic, a little-endian `u64` header length, a JSON list of
//! named tensor shapes, then every tensor as little-endian `f64` in header order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PGWT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let header: Vec<TensorEntry> = tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let header = serde_json::to_vec(&header).expect("tensor header serializes");
    let n: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let corrupt = |m: &str| Error::CorruptWeights(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing PGWT magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(12..)
        .and_then(|b| b.get(..hlen).map(|h| (h, &b[hlen..])))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Vec<TensorEntry> =
        serde_json::from_slice(body.0).map_err(|e| Error::CorruptWeights(format!("header: {e}")))?;
    let mut data = body.1;
    let mut out = Vec::with_capacity(header.len());
    for entry in header {
        let n: usize = entry.shape.iter().product();
        let need = n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?;
        if data.len() < need {
            return Err(Error::CorruptWeights(format!(
                "tensor `{}` truncated",
                entry.name
            )));
        }
        let values: Vec<f64> = data[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptWeights(format!(
                "tensor `{}` holds non-finite values",
                entry.name
            )));
        }
        data = &data[need..];
        out.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data: values,
        });
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

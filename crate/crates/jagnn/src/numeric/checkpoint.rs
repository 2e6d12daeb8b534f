//! Versioned JSON serialization of named tensors.
//!
//! Values are written as concatenated 16-digit hex encodings of the IEEE 754
//! bit pattern, so round-trips are bit-exact. The `header` slot carries an
//! arbitrary JSON document (architecture manifest, resolved config, frozen
//! covariances) owned by the caller.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    Version(u32),
    #[error("tensor {name}: {msg}")]
    BadTensor { name: String, msg: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    /// 16 hex digits per value, big-endian bit pattern.
    data: String,
}

/// On-disk layout: version, caller-defined header, named tensors.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub header: serde_json::Value,
    tensors: BTreeMap<String, TensorRecord>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>, String> {
    if s.len() % 16 != 0 {
        return Err(format!("hex payload length {} is not a multiple of 16", s.len()));
    }
    let mut out = Vec::with_capacity(s.len() / 16);
    for chunk in s.as_bytes().chunks(16) {
        let txt = std::str::from_utf8(chunk).map_err(|_| "non-ascii hex".to_string())?;
        let bits = u64::from_str_radix(txt, 16).map_err(|e| format!("bad hex {txt:?}: {e}"))?;
        out.push(f64::from_bits(bits));
    }
    Ok(out)
}

/// Write named tensors plus a caller-defined JSON header.
pub fn write_named_tensors(
    path: &Path,
    header: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        header,
        tensors: tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: encode_f64s(t.data()),
                    },
                )
            })
            .collect(),
    };
    let f = File::create(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n").map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Read back a checkpoint; validates version and per-tensor shape/payload
/// consistency.
pub fn read_named_tensors(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, Tensor>), CheckpointError> {
    let f = File::open(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(f))?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(file.format_version));
    }
    let mut out = BTreeMap::new();
    for (name, rec) in file.tensors {
        let data = decode_f64s(&rec.data).map_err(|msg| CheckpointError::BadTensor {
            name: name.clone(),
            msg,
        })?;
        let expect: usize = rec.shape.iter().product();
        if expect != data.len() {
            return Err(CheckpointError::BadTensor {
                name,
                msg: format!("shape {:?} does not match {} values", rec.shape, data.len()),
            });
        }
        let t = Tensor::new(rec.shape, data).map_err(|e| CheckpointError::BadTensor {
            name: name.clone(),
            msg: e.to_string(),
        })?;
        out.insert(name, t);
    }
    Ok((file.header, out))
}

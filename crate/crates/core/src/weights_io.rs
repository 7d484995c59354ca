//! Weight file format.
//!
//! ```text
//! u64 LE   header length in bytes
//! JSON     {"format": "choreo-weights-v1", "config": ModelConfig,
//!           "tensors": [{"name", "shape", "offset"}]}
//! f32 LE   tensor blobs, canonical order, offsets in values from blob start
//! ```
//!
//! Values are always stored at 32 bits; loading into an `f64` engine upcasts.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::model::{ModelConfig, TensorInfo, WeightSet};
use crate::tensor::Scalar;

const FORMAT: &str = "choreo-weights-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    #[serde(flatten)]
    info: TensorInfo,
    offset: usize,
}

pub fn write_weights<T: Scalar, W: Write>(weights: &WeightSet<T>, mut out: W) -> Result<()> {
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (info, data) in weights.tensors() {
        tensors.push(ManifestEntry { info, offset });
        offset += data.len();
    }
    let header = Header {
        format: FORMAT.into(),
        config: weights.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ChoreoError::WeightFormat(e.to_string()))?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, data) in weights.tensors() {
        let mut buf = Vec::with_capacity(data.len() * 4);
        for x in data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_weights<T: Scalar, R: Read>(mut input: R) -> Result<WeightSet<T>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(ChoreoError::WeightFormat(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| ChoreoError::WeightFormat(e.to_string()))?;
    if header.format != FORMAT {
        return Err(ChoreoError::WeightFormat(format!(
            "unsupported format tag {:?}",
            header.format
        )));
    }
    let expected = WeightSet::<T>::manifest(&header.config);
    let listed: Vec<&TensorInfo> = header.tensors.iter().map(|t| &t.info).collect();
    if listed.len() != expected.len() || listed.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(ChoreoError::WeightFormat(
            "tensor manifest does not match config".into(),
        ));
    }
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;
    let total: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(ChoreoError::WeightFormat(format!(
            "expected {} bytes of tensor data, found {}",
            total * 4,
            blob.len()
        )));
    }
    let mut flats = Vec::with_capacity(expected.len());
    for entry in &header.tensors {
        let n: usize = entry.info.shape.iter().product();
        let bytes = blob
            .get(entry.offset * 4..(entry.offset + n) * 4)
            .ok_or_else(|| ChoreoError::WeightFormat(format!("{} out of bounds", entry.info.name)))?;
        flats.push(
            bytes
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        );
    }
    WeightSet::from_flat(header.config, flats)
}

pub fn save<T: Scalar>(weights: &WeightSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(weights, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<WeightSet<T>> {
    read_weights(fs::File::open(path)?)
}

//! The DFFA activation container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DFFA"
//!      4     2  version, u16 LE (= 1)
//!      6     1  dtype, u8 (1 = float32)
//!      7     1  ndim, u8 (= 3)
//!      8    12  dims h, w, c as u32 LE
//!     20  4·hwc payload, f32 LE, row-major (h, w, c)
//! ```

use std::fs;
use std::path::Path;

use super::AdapterError;
use crate::tensor::ActivationTensor;

pub const MAGIC: [u8; 4] = *b"DFFA";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_activations(t: &ActivationTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(3);
    for d in [t.height(), t.width(), t.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_activations(image_id: &str, bytes: &[u8]) -> Result<ActivationTensor, AdapterError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(AdapterError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(AdapterError::DimMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AdapterError::VersionUnsupported(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(AdapterError::FormatUnsupported(format!("dtype {}", bytes[6])));
    }
    if bytes[7] != 3 {
        return Err(AdapterError::FormatUnsupported(format!("ndim {}", bytes[7])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let payload = &bytes[HEADER_LEN..];
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or(AdapterError::DimMismatch { expected: usize::MAX, actual: payload.len() / 4 })?;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(AdapterError::DimMismatch {
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ActivationTensor::new(image_id, h, w, c, data)?)
}

pub fn save_activations(t: &ActivationTensor, path: &Path) -> Result<(), AdapterError> {
    fs::write(path, encode_activations(t)).map_err(|e| AdapterError::io(path, e))
}

/// Loads a DFFA file; the tensor's image id is the file stem.
pub fn load_activations(path: &Path) -> Result<ActivationTensor, AdapterError> {
    let bytes = fs::read(path).map_err(|e| AdapterError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_activations(&id, &bytes)
}

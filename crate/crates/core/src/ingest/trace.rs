use std::path::Path;

use super::{read_bytes, stem, write_atomic, IngestError};
use crate::numkit::Vector;
use crate::signals::{HiddenStateTrace, ReferenceEmbedding, REFERENCE_DIM};

pub const TRACE_MAGIC: &[u8; 4] = b"HST1";
pub const TRACE_FORMAT_VERSION: u32 = 1;
/// Magic, version, L, H.
pub const HEADER_LEN: usize = 16;

fn encode_layers(layers: &[Vector]) -> Vec<u8> {
    let l = layers.len();
    let h = layers.first().map_or(0, |v| v.dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * l * h);
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for layer in layers {
        for v in layer.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn decode_layers(bytes: &[u8], min_layers: usize) -> Result<Vec<Vector>, IngestError> {
    if bytes.len() < HEADER_LEN {
        return Err(IngestError::format(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != TRACE_MAGIC {
        return Err(IngestError::format(
            0,
            format!("bad magic {:?}", &bytes[..4]),
        ));
    }
    let version = u32_at(bytes, 4);
    if version != TRACE_FORMAT_VERSION {
        return Err(IngestError::format(
            4,
            format!("unsupported version {version}"),
        ));
    }
    let l = u32_at(bytes, 8) as usize;
    let h = u32_at(bytes, 12) as usize;
    if l < min_layers {
        return Err(IngestError::format(
            8,
            format!("layer count {l} below minimum {min_layers}"),
        ));
    }
    if h == 0 {
        return Err(IngestError::format(12, "hidden dim is 0"));
    }
    let payload = l
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| {
            IngestError::format(8, format!("payload size overflows for L={l}, H={h}"))
        })?;
    let expected = HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err(IngestError::format(
            bytes.len(),
            format!(
                "truncated payload: expected {expected} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(IngestError::format(
            expected,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let mut layers = Vec::with_capacity(l);
    for i in 0..l {
        let mut v = Vec::with_capacity(h);
        for j in 0..h {
            let off = HEADER_LEN + 4 * (i * h + j);
            let x = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(IngestError::format(
                    off,
                    format!("non-finite value at layer {i}, dim {j}"),
                ));
            }
            v.push(f64::from(x));
        }
        layers.push(Vector::new(v));
    }
    Ok(layers)
}

/// HST1 bytes of a trace. Values are stored as 32-bit floats.
pub fn encode_trace(trace: &HiddenStateTrace) -> Vec<u8> {
    encode_layers(trace.layers())
}

pub fn decode_trace(
    bytes: &[u8],
    query_id: impl Into<String>,
) -> Result<HiddenStateTrace, IngestError> {
    Ok(HiddenStateTrace::new(query_id, decode_layers(bytes, 2)?)?)
}

/// A reference embedding stored as a one-layer HST1 file.
pub fn encode_embedding(e: &ReferenceEmbedding) -> Vec<u8> {
    encode_layers(std::slice::from_ref(e.vector()))
}

pub fn decode_embedding(
    bytes: &[u8],
    query_id: impl Into<String>,
) -> Result<ReferenceEmbedding, IngestError> {
    let mut layers = decode_layers(bytes, 1)?;
    if layers.len() != 1 || layers[0].dim() != REFERENCE_DIM {
        return Err(IngestError::format(
            8,
            format!(
                "reference embedding must be 1×{REFERENCE_DIM}, got {}×{}",
                layers.len(),
                layers[0].dim()
            ),
        ));
    }
    Ok(ReferenceEmbedding::new(query_id, layers.remove(0))?)
}

pub fn write_trace(path: &Path, trace: &HiddenStateTrace) -> Result<(), IngestError> {
    write_atomic(path, &encode_trace(trace))
}

/// Reads an HST1 trace; the query id is taken from the file stem.
pub fn read_trace(path: &Path) -> Result<HiddenStateTrace, IngestError> {
    decode_trace(&read_bytes(path)?, stem(path))
}

pub fn write_embedding(path: &Path, e: &ReferenceEmbedding) -> Result<(), IngestError> {
    write_atomic(path, &encode_embedding(e))
}

pub fn read_embedding(path: &Path) -> Result<ReferenceEmbedding, IngestError> {
    decode_embedding(&read_bytes(path)?, stem(path))
}

//! `NSAE` embedding files.
//!
//! Layout (all little-endian): magic `NSAE`, version `u32`, `N` `u64`, `d`
//! `u64`, `N·d` `f32` row-major, metadata length `u32`, UTF-8 JSON metadata.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ByteReader;
use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"NSAE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    feature_map: String,
    checkpoint: String,
    classes: Vec<u16>,
    outlier: Vec<bool>,
}

pub fn write_embeddings(set: &EmbeddingSet, w: &mut impl Write) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    w.write_all(&(set.dim() as u64).to_le_bytes())?;
    let mut payload = Vec::with_capacity(set.data().len() * 4);
    for v in set.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    let meta = serde_json::to_vec(&Metadata {
        feature_map: set.feature_map.clone(),
        checkpoint: set.checkpoint.clone(),
        classes: set.classes.clone(),
        outlier: set.outlier.clone(),
    })?;
    let len = u32::try_from(meta.len()).map_err(|_| NsaError::config("metadata too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&meta)?;
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<EmbeddingSet> {
    let mut rd = ByteReader::new(r);
    let magic = rd.array::<4>("magic")?;
    if &magic != EMBEDDING_MAGIC {
        return Err(NsaError::format(0, format!("bad magic {magic:?}, expected NSAE")));
    }
    let version = rd.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(NsaError::format(4, format!("unsupported version {version}")));
    }
    let n = rd.u64("row count")? as usize;
    let d = rd.u64("dimension")? as usize;
    let payload_len = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| NsaError::format(rd.offset, "payload size overflows"))?;
    let raw = rd.bytes(payload_len, "payload")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let meta_len = rd.u32("metadata length")? as usize;
    let meta_offset = rd.offset;
    let meta = rd.bytes(meta_len, "metadata")?;
    let meta: Metadata = serde_json::from_slice(&meta)
        .map_err(|e| NsaError::format(meta_offset, format!("metadata JSON: {e}")))?;
    EmbeddingSet::new(n, d, data)?
        .with_labels(meta.classes, meta.outlier)
        .map(|s| s.with_source(meta.feature_map, meta.checkpoint))
}

//! `NSAM` checkpoint files.
//!
//! Layout (little-endian): magic `NSAM`, version `u32`, JSON header length
//! `u32`, JSON header, then every parameter in declaration order as
//! name length `u32`, UTF-8 name, rank `u32`, `rank × u64` dims, `f32` payload.
//! Online parameters come first, followed by the BYOL target (names prefixed
//! with `target.`).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SslModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::data::ByteReader;
use crate::error::{NsaError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSAM";
pub const CHECKPOINT_VERSION: u32 = 1;

const TARGET_PREFIX: &str = "target.";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    online_params: usize,
    target_params: usize,
}

fn write_store(store: &ParamStore, prefix: &str, w: &mut impl Write) -> Result<()> {
    for (_, p) in store.iter() {
        let name = format!("{prefix}{}", p.name);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_checkpoint(model: &SslModel, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        online_params: model.params.len(),
        target_params: model.target.as_ref().map_or(0, ParamStore::len),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    write_store(&model.params, "", w)?;
    if let Some(t) = &model.target {
        write_store(t, TARGET_PREFIX, w)?;
    }
    Ok(())
}

fn read_into<R: Read>(rd: &mut ByteReader<'_, R>, store: &mut ParamStore, prefix: &str) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let at = rd.offset;
        let len = rd.u32("parameter name length")? as usize;
        let name = String::from_utf8(rd.bytes(len, "parameter name")?)
            .map_err(|_| NsaError::format(at, "parameter name is not UTF-8"))?;
        let want = format!("{prefix}{}", store.name(id));
        if name != want {
            return Err(NsaError::format(at, format!("expected parameter `{want}`, found `{name}`")));
        }
        let rank = rd.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64("dimension")? as usize);
        }
        if shape != store.get(id).shape() {
            return Err(NsaError::format(
                at,
                format!("parameter `{name}` has shape {shape:?}, model expects {:?}", store.get(id).shape()),
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = rd.bytes(numel * 4, "parameter payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *store.get_mut(id) = Tensor::new(shape, data)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<SslModel> {
    let mut rd = ByteReader::new(r);
    let magic = rd.array::<4>("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NsaError::format(0, format!("bad magic {magic:?}, expected NSAM")));
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NsaError::format(4, format!("unsupported version {version}")));
    }
    let len = rd.u32("header length")? as usize;
    let at = rd.offset;
    let header: Header = serde_json::from_slice(&rd.bytes(len, "header")?)
        .map_err(|e| NsaError::format(at, format!("header JSON: {e}")))?;
    let mut model = SslModel::new(header.model)?;
    let target_len = model.target.as_ref().map_or(0, ParamStore::len);
    if header.online_params != model.params.len() || header.target_params != target_len {
        return Err(NsaError::format(
            at,
            format!(
                "header lists {}+{} parameters, architecture has {}+{}",
                header.online_params,
                header.target_params,
                model.params.len(),
                target_len
            ),
        ));
    }
    read_into(&mut rd, &mut model.params, "")?;
    if let Some(t) = model.target.as_mut() {
        read_into(&mut rd, t, TARGET_PREFIX)?;
    }
    Ok(model)
}

//! Weight persistence.
//!
//! Container layout: `RKWT` magic, a u32 format version, a JSON header
//! (config plus normalization statistics, length-prefixed), then the flat
//! parameter buffer as little-endian f64 with a count prefix. Loading
//! revalidates the parameter count against the configuration so shape
//! mismatches fail with a message naming both sides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ChannelStats, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"RKWT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: ChannelStats,
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: params.config().clone(),
        norm: params.norm.clone(),
    })
    .map_err(|e| Error::Load(format!("header serialization failed: {e}")))?;

    let values = params.values();
    let mut out = Vec::with_capacity(16 + header.len() + values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Load(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                n,
                *cursor,
                bytes.len()
            )));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::Load("not a repkit checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Load(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut cursor, header_len)?)
        .map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(Error::Load(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cursor
        )));
    }
    ModelParams::from_parts(header.config, header.norm, values)
}

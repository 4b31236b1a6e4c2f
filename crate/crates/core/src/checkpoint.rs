//! Binary checkpoint format.
//!
//! Layout:
//!
//! ```text
//! magic "FEDERASE" | u32 version | u32 manifest_len | manifest JSON
//! | zero padding to a 64-byte boundary | tensor payloads (f32 LE)
//! ```
//!
//! The manifest records every tensor's name, shape, byte range (relative
//! to the data section), and CRC32, plus a free-form string meta map that
//! carries enough context (seed, configs) to regenerate the training data.
//! Tensors are stored in name order, so saving the same model twice yields
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

pub const MAGIC: &[u8; 8] = b"FEDERASE";
pub const VERSION: u32 = 1;
const DATA_ALIGN: usize = 64;
const MAX_MANIFEST: u32 = 16 << 20;

/// CRC32 (IEEE 802.3, reflected, poly 0xEDB88320), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Payload length in bytes.
    len: u64,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// Serializes parameters and metadata to the checkpoint byte format.
pub fn to_bytes(params: &NamedTensors, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = data.len() as u64;
        for &v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let len = data.len() as u64 - offset;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len,
            crc32: crc32(&data[offset as usize..(offset + len) as usize]),
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        meta: meta.clone(),
    })?;
    if manifest.len() as u64 > MAX_MANIFEST as u64 {
        return Err(Error::Checkpoint("manifest too large".into()));
    }

    let mut out = Vec::with_capacity(16 + manifest.len() + DATA_ALIGN + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    while out.len() % DATA_ALIGN != 0 {
        out.push(0);
    }
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses checkpoint bytes, verifying structure and every tensor's CRC.
pub fn from_bytes(bytes: &[u8]) -> Result<(NamedTensors, BTreeMap<String, String>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("checkpoint header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if manifest_len > MAX_MANIFEST {
        return Err(Error::Checkpoint("manifest too large".into()));
    }
    let manifest_end = 16usize
        .checked_add(manifest_len as usize)
        .ok_or(Error::Truncated("manifest"))?;
    if bytes.len() < manifest_end {
        return Err(Error::Truncated("manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    let data_start = manifest_end.div_ceil(DATA_ALIGN) * DATA_ALIGN;

    let mut params = NamedTensors::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.len as usize != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "`{}`: shape {:?} disagrees with payload of {} bytes",
                e.name, e.shape, e.len
            )));
        }
        let start = data_start
            .checked_add(e.offset as usize)
            .ok_or(Error::Truncated("tensor payload"))?;
        let end = start
            .checked_add(e.len as usize)
            .ok_or(Error::Truncated("tensor payload"))?;
        if bytes.len() < end {
            return Err(Error::Truncated("tensor payload"));
        }
        let payload = &bytes[start..end];
        let computed = crc32(payload);
        if computed != e.crc32 {
            return Err(Error::ChecksumMismatch {
                name: e.name.clone(),
                stored: e.crc32,
                computed,
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.get(&e.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
        params.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok((params, manifest.meta))
}

pub fn save(
    path: impl AsRef<Path>,
    params: &NamedTensors,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(NamedTensors, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

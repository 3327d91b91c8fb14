//! Little-endian binary container for checkpoints and linear maps.
//!
//! Layout: magic `NIWT`, format version u32, header length u64, UTF-8 JSON
//! header (caller metadata plus a per-tensor shape/offset table), then raw
//! f64 payloads. Offsets in the table are relative to the payload start.
//! Round-trips are bit-exact.

use crate::array::Array;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NIWT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a NIWT container)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor table inconsistent: {0}")]
    Table(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// f64 offset into the payload, not a byte offset.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Array)],
) -> Result<(), ContainerError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, arr) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
            len: arr.len() as u64,
        });
        offset += arr.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, arr) in tensors {
        for v in arr.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Array)>), ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(ContainerError::Table("payload not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > values.len() {
            return Err(ContainerError::Table(format!(
                "tensor {} extends past payload ({} > {})",
                e.name,
                end,
                values.len()
            )));
        }
        if e.shape.iter().product::<usize>() != e.len as usize {
            return Err(ContainerError::Table(format!(
                "tensor {} shape {:?} does not match len {}",
                e.name, e.shape, e.len
            )));
        }
        out.push((e.name, Array::from_parts(e.shape, values[start..end].to_vec())));
    }
    Ok((header.meta, out))
}

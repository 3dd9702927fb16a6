//! `SPMW` weight files: named f64 tensors.
//!
//! Layout (little endian): `"SPMW"`, version `u8`, tensor count `u32`, then per
//! tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims and the f64
//! payload.

use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const SPMW_MAGIC: &[u8; 4] = b"SPMW";
pub const SPMW_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an SPMW file")]
    BadMagic,
    #[error("unsupported SPMW version {0}")]
    UnsupportedVersion(u8),
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid tensor entry: {0}")]
    BadEntry(String),
}

pub fn encode_spmw(params: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(SPMW_MAGIC);
    out.push(SPMW_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::BadEntry(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| CheckpointError::BadEntry(format!("rank of {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| CheckpointError::BadEntry(format!("dim of {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decoded tensors are not marked trainable.
pub fn decode_spmw(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != SPMW_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u8()?;
    if version != SPMW_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::BadEntry("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let payload = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::BadEntry(e.to_string()))?;
        if store.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::BadEntry(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(store)
}

/// Writes through a temporary file and renames it into place.
pub fn save_spmw(params: &ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_spmw(params)?;
    let tmp = path.with_extension("spmw.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_spmw(path: impl AsRef<Path>) -> Result<ParamStore, CheckpointError> {
    decode_spmw(&std::fs::read(path)?)
}

//! Binary tensor container.
//!
//! Layout, little-endian: `b"OPOT"`, version `u8 = 1`, dtype `u8` (1 = f32),
//! rank `u8`, `rank` x `u64` dimensions, then the row-major payload.

use std::fs;
use std::io;
use std::path::Path;

use opo_core::Tensor;

pub const MAGIC: &[u8; 4] = b"OPOT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: not a tensor file")]
    BadMagic,
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u8),
    #[error("dtype mismatch: expected code {DTYPE_F32} (f32), found {0}")]
    DtypeMismatch(u8),
    #[error("truncated tensor file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("tensor dimensions overflow")]
    Overflow,
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(u8::try_from(t.rank()).expect("tensor rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn need(bytes: &[u8], needed: usize) -> Result<(), FormatError> {
    if bytes.len() < needed {
        Err(FormatError::Truncated {
            needed,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    need(bytes, 7)?;
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::DtypeMismatch(bytes[5]));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    need(bytes, header)?;
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(8)
        .map(|c| usize::try_from(u64::from_le_bytes(c.try_into().unwrap())).map_err(|_| FormatError::Overflow))
        .collect::<Result<_, _>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(FormatError::Overflow)?;
    let total = numel
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or(FormatError::Overflow)?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total));
    }
    let data = bytes[header..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data).expect("payload length matches shape"))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    fs::write(path, encode(t)).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FormatError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

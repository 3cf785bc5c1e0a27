//! Binary tensor container used for fixtures, latents, masks and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SYCD" | u8 version = 1 | u8 dtype = 0 (f64) | u32 rank | rank x u64 dims | f64 payload
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"SYCD";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("container truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0}")]
    Tensor(#[from] TensorError),
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated {
                needed: end,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F64 {
        return Err(ContainerError::Dtype(dtype));
    }
    let rank = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.ok_or(ContainerError::Truncated {
        needed: usize::MAX,
        have: bytes.len(),
    })?;
    let payload = r.take(count.saturating_mul(8))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<(), ContainerError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor, ContainerError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

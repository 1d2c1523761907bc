//! Named-tensor checkpoint codec.
//!
//! Layout (all integers little-endian):
//!   magic `NTB1`, version u32, entry count u32, then per entry:
//!   name length u32, name bytes (UTF-8), shape rank u32, dims u32 each,
//!   f32 payload.
//! Entries are written in name order, so serialization is deterministic.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::params::ParamSet;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    Truncated,
    BadMagic,
    UnsupportedVersion(u32),
    BadName,
    Oversized { what: &'static str, value: u64 },
}

impl core::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Truncated => write!(f, "checkpoint data ends prematurely"),
            Self::BadMagic => write!(f, "not a named-tensor checkpoint (bad magic)"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Self::BadName => write!(f, "checkpoint entry name is not valid UTF-8"),
            Self::Oversized { what, value } => {
                write!(f, "checkpoint field {what} has implausible size {value}")
            }
        }
    }
}

const MAX_FIELD: u64 = 1 << 31;

pub fn write_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_params(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = cur.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as u64;
        if name_len > MAX_FIELD {
            return Err(CheckpointError::Oversized {
                what: "name length",
                value: name_len,
            });
        }
        let name_bytes = cur.take(name_len as usize)?;
        let name: String = core::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Oversized {
                what: "rank",
                value: rank as u64,
            });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            n = n.saturating_mul(d as u64);
            shape.push(d);
        }
        if n > MAX_FIELD {
            return Err(CheckpointError::Oversized {
                what: "tensor size",
                value: n,
            });
        }
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    Ok(params)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let mut params = ParamSet::new();
        params.init_normal("dec.l0.wq", &[4, 4], 0.02, 9);
        params.init_normal("embed.mix.k0", &[7, 4], 0.02, 9);
        params.insert("scalar", Tensor::scalar(3.25));
        let bytes = write_params(&params);
        let back = read_params(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut params = ParamSet::new();
        params.init_normal("b", &[3], 0.02, 1);
        params.init_normal("a", &[2, 2], 0.02, 1);
        assert_eq!(write_params(&params), write_params(&params));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = write_params(&ParamSet::new());
        bytes[0] = b'X';
        assert_eq!(read_params(&bytes), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn truncation_rejected() {
        let mut params = ParamSet::new();
        params.init_normal("w", &[8], 0.02, 2);
        let bytes = write_params(&params);
        assert_eq!(
            read_params(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        );
    }
}

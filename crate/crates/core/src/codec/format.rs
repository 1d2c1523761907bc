//! Codebook file codec.
//!
//! Layout (little-endian): magic `RVQ1`, version u32, n_q u32, k u32,
//! feature dim u32, sample rate u32, frame rate u32, default scale f32,
//! then `n_q * k * dim` centroid f32s stage by stage.

use alloc::vec::Vec;

use super::CodebookSet;
use crate::numerics::checkpoint::Cursor;

pub const MAGIC: &[u8; 4] = b"RVQ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodebookFormatError {
    Truncated,
    BadMagic,
    UnsupportedVersion(u32),
    BadHeader(&'static str),
}

impl core::fmt::Display for CodebookFormatError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Truncated => write!(f, "codebook file ends prematurely"),
            Self::BadMagic => write!(f, "not a codebook file (bad magic)"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported codebook version {v}"),
            Self::BadHeader(msg) => write!(f, "bad codebook header: {msg}"),
        }
    }
}

pub fn write_codebooks(set: &CodebookSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.n_q() as u32).to_le_bytes());
    out.extend_from_slice(&(set.k() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&set.sample_rate().to_le_bytes());
    out.extend_from_slice(&set.frame_rate().to_le_bytes());
    out.extend_from_slice(&set.default_scale().to_le_bytes());
    for s in 0..set.n_q() {
        for &v in set.stage(s) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_codebooks(bytes: &[u8]) -> Result<CodebookSet, CodebookFormatError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).map_err(|_| CodebookFormatError::Truncated)?;
    if magic != MAGIC {
        return Err(CodebookFormatError::BadMagic);
    }
    let u32_of = |cur: &mut Cursor| cur.u32().map_err(|_| CodebookFormatError::Truncated);
    let version = u32_of(&mut cur)?;
    if version != VERSION {
        return Err(CodebookFormatError::UnsupportedVersion(version));
    }
    let n_q = u32_of(&mut cur)? as usize;
    let k = u32_of(&mut cur)? as usize;
    let dim = u32_of(&mut cur)? as usize;
    let sample_rate = u32_of(&mut cur)?;
    let frame_rate = u32_of(&mut cur)?;
    let default_scale = cur.f32().map_err(|_| CodebookFormatError::Truncated)?;
    if n_q == 0 || k < 2 || dim == 0 {
        return Err(CodebookFormatError::BadHeader("degenerate dimensions"));
    }
    if n_q > 64 || k > 1 << 20 || dim > 1 << 20 {
        return Err(CodebookFormatError::BadHeader("implausible dimensions"));
    }
    if frame_rate == 0 || sample_rate == 0 || sample_rate % frame_rate != 0 {
        return Err(CodebookFormatError::BadHeader("frame rate must divide sample rate"));
    }
    let mut stages = Vec::with_capacity(n_q);
    for _ in 0..n_q {
        let mut stage = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            stage.push(cur.f32().map_err(|_| CodebookFormatError::Truncated)?);
        }
        stages.push(stage);
    }
    Ok(CodebookSet::from_parts(
        n_q,
        k,
        dim,
        sample_rate,
        frame_rate,
        default_scale,
        stages,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{train_rvq, RvqConfig};
    use crate::rng::SeedRng;

    #[test]
    fn roundtrip() {
        let mut rng = SeedRng::new(5);
        let frames: Vec<f32> = (0..40 * 8).map(|_| rng.gaussian()).collect();
        let config = RvqConfig {
            n_q: 3,
            k: 4,
            iterations: 8,
            sample_rate: 16_000,
            frame_rate: 2_000,
        };
        let mut set = train_rvq(&frames, 8, &config, 7).unwrap();
        set.set_default_scale(0.25);
        let bytes = write_codebooks(&set);
        let back = read_codebooks(&bytes).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let mut rng = SeedRng::new(6);
        let frames: Vec<f32> = (0..16 * 4).map(|_| rng.gaussian()).collect();
        let config = RvqConfig {
            n_q: 1,
            k: 2,
            iterations: 4,
            sample_rate: 16_000,
            frame_rate: 4_000,
        };
        let set = train_rvq(&frames, 4, &config, 3).unwrap();
        let bytes = write_codebooks(&set);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert_eq!(read_codebooks(&bad), Err(CodebookFormatError::BadMagic));
        assert_eq!(
            read_codebooks(&bytes[..bytes.len() - 1]),
            Err(CodebookFormatError::Truncated)
        );
    }
}

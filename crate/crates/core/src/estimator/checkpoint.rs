//! `REDW` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "REDW"            magic
//! u32               format version (1)
//! u32, u32 * n      number of feature maps, then each width
//! u32               kernel size
//! u32               time embedding dimension
//! u32               activation (0 = SiLU, 1 = identity)
//! u64               parameter count
//! f32 * count       parameters, segment by segment
//! u32               CRC-32 of every preceding byte
//! ```

use std::path::Path;

use super::{Activation, EstimatorParams, NetArch};
use crate::error::{RedError, Result};

const MAGIC: &[u8; 4] = b"REDW";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &EstimatorParams<f32>) -> Result<Vec<u8>> {
    params.check()?;
    let arch = &params.arch;
    let mut buf = Vec::with_capacity(64 + 4 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.widths.len() as u32).to_le_bytes());
    for &w in &arch.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(arch.kernel as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.time_dim as u32).to_le_bytes());
    buf.extend_from_slice(&arch.activation.code().to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RedError::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EstimatorParams<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(RedError::Format("not a REDW checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(RedError::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(RedError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_widths = r.u32()? as usize;
    if n_widths > 1024 {
        return Err(RedError::Format(format!("implausible layer count {n_widths}")));
    }
    let widths = (0..n_widths)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = NetArch {
        widths,
        kernel: r.u32()? as usize,
        time_dim: r.u32()? as usize,
        activation: Activation::from_code(r.u32()?)?,
    };
    arch.validate()?;
    let count = r.u64()? as usize;
    if count != arch.param_count() {
        return Err(RedError::ArchMismatch(format!(
            "checkpoint holds {count} parameters, its architecture needs {}",
            arch.param_count()
        )));
    }
    let raw = r.take(4 * count)?;
    if r.pos != body.len() {
        return Err(RedError::Format("trailing bytes in checkpoint".into()));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = EstimatorParams { arch, values };
    params.check()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &EstimatorParams<f32>) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| RedError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EstimatorParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| RedError::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! `RSF1` container for images and sinograms.
//!
//! ```text
//! "RSF1"        magic
//! u32 x 3       kind (0 image, 1 sinogram), dim0, dim1
//! f64 x 2       scale, offset
//! f32 * n       payload, row-major, n = dim0 * dim1
//! u32           CRC-32 of the payload bytes
//! ```
//!
//! Little-endian throughout. Images store `(height, width)`, sinograms
//! `(angles, bins)`.

use std::path::Path;

use crate::dose::ScaleRecord;
use crate::error::{RedError, Result};
use crate::tomo::{Image, Sinogram};

const MAGIC: &[u8; 4] = b"RSF1";
const HEADER: usize = 4 + 12 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsfKind {
    Image = 0,
    Sinogram = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsfArray {
    pub kind: RsfKind,
    pub dims: (usize, usize),
    pub scale: ScaleRecord,
    pub data: Vec<f32>,
}

impl RsfArray {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.0 * self.dims.1 != self.data.len() {
            return Err(RedError::ShapeMismatch {
                expected: self.dims,
                actual: (self.data.len(), 1),
            });
        }
        let mut buf = Vec::with_capacity(HEADER + 4 * self.data.len() + 4);
        buf.extend_from_slice(MAGIC);
        for v in [self.kind as u32, self.dims.0 as u32, self.dims.1 as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.scale.scale.to_le_bytes());
        buf.extend_from_slice(&self.scale.offset.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf[HEADER..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RedError::Format(format!("rsf: {m}"));
        if bytes.len() < HEADER + 4 || &bytes[..4] != MAGIC {
            return Err(bad("not an RSF1 file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let kind = match u32_at(4) {
            0 => RsfKind::Image,
            1 => RsfKind::Sinogram,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let dims = (u32_at(8) as usize, u32_at(12) as usize);
        let n = dims.0.checked_mul(dims.1).ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() != HEADER + 4 * n + 4 {
            return Err(bad(&format!(
                "{} bytes for a {}x{} payload",
                bytes.len(),
                dims.0,
                dims.1
            )));
        }
        let payload = &bytes[HEADER..HEADER + 4 * n];
        if crc32fast::hash(payload) != u32_at(HEADER + 4 * n) {
            return Err(bad("payload checksum mismatch"));
        }
        let scale = ScaleRecord {
            scale: f64_at(16),
            offset: f64_at(24),
        };
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            dims,
            scale,
            data,
        })
    }

    pub fn from_sinogram(s: &Sinogram) -> Self {
        Self {
            kind: RsfKind::Sinogram,
            dims: s.shape(),
            scale: s.scale.unwrap_or(ScaleRecord::IDENTITY),
            data: s.values.clone(),
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            kind: RsfKind::Image,
            dims: (img.height, img.width),
            scale: ScaleRecord::IDENTITY,
            data: img.pixels.clone(),
        }
    }

    pub fn into_sinogram(self) -> Result<Sinogram> {
        if self.kind != RsfKind::Sinogram {
            return Err(RedError::Format("rsf: expected a sinogram".into()));
        }
        let mut s = Sinogram::from_vec(self.dims.0, self.dims.1, self.data)?;
        if self.scale != ScaleRecord::IDENTITY {
            s.scale = Some(self.scale);
        }
        Ok(s)
    }

    pub fn into_image(self) -> Result<Image> {
        if self.kind != RsfKind::Image {
            return Err(RedError::Format("rsf: expected an image".into()));
        }
        Image::from_vec(self.dims.1, self.dims.0, self.data)
    }
}

pub fn write_rsf(path: &Path, arr: &RsfArray) -> Result<()> {
    std::fs::write(path, arr.encode()?).map_err(|e| RedError::io(path, e))
}

pub fn read_rsf(path: &Path) -> Result<RsfArray> {
    let bytes = std::fs::read(path).map_err(|e| RedError::io(path, e))?;
    RsfArray::decode(&bytes).map_err(|e| match e {
        RedError::Format(m) => RedError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_rsf(path, &RsfArray::from_sinogram(s))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    read_rsf(path)?.into_sinogram()
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_rsf(path, &RsfArray::from_image(img))
}

pub fn read_image(path: &Path) -> Result<Image> {
    read_rsf(path)?.into_image()
}

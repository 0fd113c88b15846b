//! 16-bit PGM previews and profile-line CSVs.

use std::path::Path;

use crate::error::{RedError, Result};

/// Binary `P5` PGM with maxval 65535. Values map linearly from `[0, peak]`
/// to the full range; negatives and NaN become 0.
pub fn encode_pgm16(values: &[f32], shape: (usize, usize), peak: f32) -> Result<Vec<u8>> {
    let (rows, cols) = shape;
    if rows * cols != values.len() || rows == 0 || cols == 0 {
        return Err(RedError::ShapeMismatch {
            expected: shape,
            actual: (values.len(), 1),
        });
    }
    let mut buf = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    let gain = if peak > 0.0 { 65535.0 / peak as f64 } else { 0.0 };
    for &v in values {
        let q = (v as f64 * gain).round();
        let q = if q >= 0.0 { q.min(65535.0) as u16 } else { 0 };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    Ok(buf)
}

pub fn write_pgm16(path: &Path, values: &[f32], shape: (usize, usize), peak: f32) -> Result<()> {
    let bytes = encode_pgm16(values, shape, peak)?;
    std::fs::write(path, bytes).map_err(|e| RedError::io(path, e))
}

/// Middle row of each named field, one column per field: `index,<name>,...`.
pub fn profile_csv(fields: &[(&str, &[f32])], shape: (usize, usize)) -> Result<String> {
    let (rows, cols) = shape;
    for (_, f) in fields {
        if f.len() != rows * cols {
            return Err(RedError::ShapeMismatch {
                expected: shape,
                actual: (f.len(), 1),
            });
        }
    }
    let mid = rows / 2;
    let mut out = String::from("index");
    for (name, _) in fields {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for c in 0..cols {
        out.push_str(&c.to_string());
        for (_, f) in fields {
            out.push_str(&format!(",{:.6}", f[mid * cols + c]));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let b = encode_pgm16(&[0.0, 0.5, 1.0, 2.0, -1.0, f32::NAN], (2, 3), 1.0).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&b[..header.len()], header);
        let px: Vec<u16> = b[header.len()..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, vec![0, 32768, 65535, 65535, 0, 0]);
    }

    #[test]
    fn profile_takes_middle_row() {
        let a = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let csv = profile_csv(&[("a", &a)], (3, 2)).unwrap();
        assert_eq!(csv, "index,a\n0,2.000000\n1,3.000000\n");
    }
}

//! Middlebury `.flo` interchange: little-endian, magic float `202021.25`,
//! `i32` width, `i32` height, then row-major interleaved `f32` (u, v) pairs.

use crate::error::{DivaError, Result};
use crate::model::types::FlowField;
use crate::tensor::Real;
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

pub const FLO_MAGIC: f32 = 202021.25;

fn format_err(path: &Path, reason: impl Into<String>) -> DivaError {
    DivaError::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Write a flow field. The payload is stored as `f32` regardless of `F`.
pub fn flow_write<F: Real>(path: &Path, flow: &FlowField<F>) -> Result<()> {
    let (h, w) = flow.dims();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&FLO_MAGIC.to_le_bytes())?;
    f.write_all(&(w as i32).to_le_bytes())?;
    f.write_all(&(h as i32).to_le_bytes())?;
    let data = flow.data();
    let mut buf = Vec::with_capacity(h * w * 8);
    for y in 0..h {
        for x in 0..w {
            buf.extend_from_slice(&(data[[y, x, 0]].to_f64() as f32).to_le_bytes());
            buf.extend_from_slice(&(data[[y, x, 1]].to_f64() as f32).to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Read a flow field. `max_norm` is not part of the format; it is set to the
/// largest magnitude present (or 1 for an all-zero field).
pub fn flow_read<F: Real>(path: &Path) -> Result<FlowField<F>> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head).map_err(|_| format_err(path, "truncated header"))?;
    let magic = f32::from_le_bytes(head[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(format_err(path, format!("bad magic {magic}")));
    }
    let w = i32::from_le_bytes(head[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(head[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > (1 << 30) {
        return Err(format_err(path, format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != h * w * 8 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), h * w * 8),
        ));
    }
    let mut data = Array3::<F>::zeros((h, w, 2));
    let mut max_mag = 0.0f64;
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let v = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        if !u.is_finite() || !v.is_finite() {
            return Err(format_err(path, "non-finite flow value"));
        }
        let (y, x) = (i / w, i % w);
        data[[y, x, 0]] = F::from_f64(u as f64);
        data[[y, x, 1]] = F::from_f64(v as f64);
        max_mag = max_mag.max(((u as f64).powi(2) + (v as f64).powi(2)).sqrt());
    }
    FlowField::new(data, F::from_f64(max_mag.max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let data = Array3::from_shape_fn((5, 7, 2), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) as f32 * 0.173).sin() * 4.0
        });
        let flow = FlowField::new(data.clone(), 8.0f32).unwrap();
        flow_write(&path, &flow).unwrap();
        let back = flow_read::<f32>(&path).unwrap();
        for (a, b) in data.iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn byte_layout_of_a_two_by_one_field() {
        // (u=1, v=-1), (u=0, v=0): 12-byte header + 16 payload bytes
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.flo");
        let data = Array3::from_shape_vec((1, 2, 2), vec![1.0f32, -1.0, 0.0, 0.0]).unwrap();
        let flow = FlowField::new(data, 2.0f32).unwrap();
        flow_write(&path, &flow).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1i32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-1.0f32).to_le_bytes());
        assert_eq!(&bytes[20..24], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &0.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("bad.flo");
        std::fs::write(&p1, [0u8; 12]).unwrap();
        assert!(matches!(flow_read::<f32>(&p1), Err(DivaError::Format { .. })));

        let p2 = dir.path().join("trunc.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 10]); // not enough payload
        std::fs::write(&p2, bytes).unwrap();
        assert!(matches!(flow_read::<f32>(&p2), Err(DivaError::Format { .. })));
    }
}

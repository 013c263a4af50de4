//! `LWF1` binary grid format.
//!
//! Layout: magic `LWF1`, then `width`, `height`, `channels` as little-endian
//! `u32`, then `width·height·channels` little-endian `f32` values, row-major
//! and top-to-bottom. Jacobian files (4 channels, row-major 2×2 per pixel)
//! append one validity byte per pixel (1 = valid).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::field::{DeformationField, JacobianField, SamplingField};
use crate::raster::Raster;

pub const MAGIC: &[u8; 4] = b"LWF1";

/// Decoded payload: the float grid plus optional validity bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LwfGrid {
    pub raster: Raster,
    pub validity: Option<Vec<bool>>,
}

pub fn encode(raster: &Raster, validity: Option<&[bool]>) -> Vec<u8> {
    let n = raster.width() * raster.height();
    let mut out = Vec::with_capacity(16 + raster.data().len() * 4 + validity.map_or(0, |_| n));
    out.extend_from_slice(MAGIC);
    for v in [raster.width(), raster.height(), raster.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in raster.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(valid) = validity {
        out.extend(valid.iter().map(|&b| b as u8));
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<LwfGrid> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing LWF1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    let n = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let body = &bytes[16..];
    if body.len() < n * 4 {
        return Err(Error::Format(format!(
            "truncated payload: {} bytes for {w}x{h}x{c} floats",
            body.len()
        )));
    }
    let data = body[..n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let rest = &body[n * 4..];
    let validity = match rest.len() {
        0 => None,
        l if l == w * h => Some(rest.iter().map(|&b| b == 1).collect()),
        l => {
            return Err(Error::Format(format!(
                "trailing block of {l} bytes, expected 0 or {}",
                w * h
            )))
        }
    };
    Ok(LwfGrid {
        raster: Raster::from_vec(w, h, c, data)?,
        validity,
    })
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    write_bytes(path, &encode(raster, None))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    Ok(decode(&read_bytes(path)?)?.raster)
}

pub fn write_sampling_field(path: &Path, f: &SamplingField) -> Result<()> {
    write_raster(path, &f.to_raster())
}

pub fn read_sampling_field(path: &Path) -> Result<SamplingField> {
    SamplingField::from_raster(&read_raster(path)?)
}

pub fn write_deformation(path: &Path, d: &DeformationField) -> Result<()> {
    write_raster(path, &d.to_raster())
}

pub fn read_deformation(path: &Path) -> Result<DeformationField> {
    DeformationField::from_raster(&read_raster(path)?)
}

pub fn encode_jacobians(j: &JacobianField) -> Vec<u8> {
    let data = j
        .matrices()
        .iter()
        .flat_map(|m| [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
        .collect();
    let r = Raster::from_vec(j.width(), j.height(), 4, data).expect("shape is consistent");
    encode(&r, Some(j.validity()))
}

pub fn decode_jacobians(bytes: &[u8]) -> Result<JacobianField> {
    let grid = decode(bytes)?;
    let r = grid.raster;
    if r.channels() != 4 {
        return Err(Error::Format(format!("Jacobian grid needs 4 channels, got {}", r.channels())));
    }
    let matrices = r
        .data()
        .chunks_exact(4)
        .map(|c| Matrix2::new(c[0], c[1], c[2], c[3]))
        .collect();
    let valid = grid
        .validity
        .ok_or_else(|| Error::Format("Jacobian grid lacks the validity block".into()))?;
    JacobianField::from_parts(r.width(), r.height(), matrices, valid)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let r = Raster::from_vec(2, 1, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let b = encode(&r, None);
        assert_eq!(&b[..4], b"LWF1");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 16 + 16);
    }

    #[test]
    fn jacobians_keep_validity() {
        let j = JacobianField::from_parts(
            2,
            1,
            vec![Matrix2::new(1.0, 2.0, 3.0, 4.0), Matrix2::identity()],
            vec![true, false],
        )
        .unwrap();
        let bytes = encode_jacobians(&j);
        assert_eq!(bytes.len(), 16 + 2 * 4 * 4 + 2);
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 0]);
        assert_eq!(decode_jacobians(&bytes).unwrap(), j);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"LWF2aaaaaaaaaaaa").is_err());
        let r = Raster::zeros(3, 3, 2);
        let mut b = encode(&r, None);
        b.truncate(b.len() - 1);
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 6)) {
            let r = Raster::from_vec(3, 1, 2, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode(&encode(&r, None)).unwrap();
            prop_assert_eq!(back.raster, r);
            prop_assert!(back.validity.is_none());
        }
    }
}

//! Minimal reader for single-file, uncompressed NIfTI-1 volumes.
//!
//! Supports datatypes uint8, int16 and float32, honours `scl_slope` /
//! `scl_inter`, and reads voxel spacing from `pixdim`. Orientation is ignored.

use std::path::Path;

use super::{Grid3, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn datatype_name(code: i16) -> &'static str {
    match code {
        1 => "binary",
        2 => "uint8",
        4 => "int16",
        8 => "int32",
        16 => "float32",
        32 => "complex64",
        64 => "float64",
        128 => "rgb24",
        256 => "int8",
        512 => "uint16",
        768 => "uint32",
        1024 => "int64",
        _ => "unknown",
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Header<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_nifti(&bytes).map_err(|e| e.in_file(path))
}

pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::format(
            0,
            "compressed NIfTI (gzip) is not supported; decompress the file first",
        ));
    }
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::format(bytes.len() as u64, "truncated NIfTI header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let little = match (le, be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::format(0, format!("sizeof_hdr is {le}, expected 348 (not a NIfTI-1 file)"))),
    };
    let h = Header { bytes, little };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(344, "magic must be \"n+1\" (single-file NIfTI-1)"));
    }
    let ndim = h.i16(40);
    let dim: Vec<i16> = (0..7).map(|i| h.i16(42 + 2 * i)).collect();
    if !(3..=7).contains(&ndim) || dim[3..ndim as usize].iter().any(|&d| d != 1) || dim[..3].iter().any(|&d| d < 1) {
        return Err(Error::format(
            40,
            format!("dim = {:?}: only 3-D volumes are supported", &dim[..ndim.clamp(0, 7) as usize]),
        ));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];
    let datatype = h.i16(70);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::format(
                70,
                format!(
                    "unsupported datatype {other} ({}); supported: uint8, int16, float32",
                    datatype_name(other)
                ),
            ))
        }
    };
    let spacing = [h.f32(80) as f64, h.f32(84) as f64, h.f32(88) as f64];
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::format(80, format!("pixdim spacing {spacing:?} must be positive")));
    }
    let vox_offset = h.f32(108);
    if vox_offset < HEADER_SIZE as f32 + 4.0 || vox_offset.fract() != 0.0 {
        return Err(Error::format(108, format!("invalid vox_offset {vox_offset}")));
    }
    if bytes[HEADER_SIZE] != 0 {
        return Err(Error::format(HEADER_SIZE as u64, "header extensions are not supported"));
    }
    let slope = h.f32(112);
    let inter = h.f32(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, inter)
    };

    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let need = count * elem;
    if bytes.len() < start || bytes.len() - start != need {
        return Err(Error::format(
            start.min(bytes.len()) as u64,
            format!(
                "data length {} bytes does not match dims {dims:?} x {elem} bytes",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let payload = &bytes[start..];
    let raw: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f32
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect(),
    };
    let data = if slope == 1.0 && inter == 0.0 {
        raw
    } else {
        raw.into_iter().map(|v| v * slope + inter).collect()
    };
    Grid3::new(dims, spacing, data)
}

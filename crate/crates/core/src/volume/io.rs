//! MVOL: a small text header followed by raw little-endian voxels.
//!
//! ```text
//! MVOL1
//! dims nx ny nz
//! spacing sx sy sz
//! dtype i16|f32|u8
//! kind intensity|labels
//!
//! <data, x fastest, then y, then z>
//! ```

use std::path::Path;

use super::{Grid3, LabelVolume, Volume};
use crate::error::{Error, Result};

const MAGIC: &str = "MVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvolDtype {
    I16,
    F32,
    U8,
}

impl MvolDtype {
    fn size(self) -> usize {
        match self {
            MvolDtype::I16 => 2,
            MvolDtype::F32 => 4,
            MvolDtype::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            MvolDtype::I16 => "i16",
            MvolDtype::F32 => "f32",
            MvolDtype::U8 => "u8",
        }
    }
}

/// A volume as stored on disk: intensities or labels.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Intensity(Volume),
    Labels(LabelVolume),
}

impl AnyVolume {
    pub fn into_intensity(self) -> Result<Volume> {
        match self {
            AnyVolume::Intensity(v) => Ok(v),
            AnyVolume::Labels(_) => Err(Error::Usage("expected an intensity volume, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Labels(v) => Ok(v),
            AnyVolume::Intensity(v) => v.to_labels(),
        }
    }
}

fn header(dims: [usize; 3], spacing: [f64; 3], dtype: MvolDtype, kind: &str) -> String {
    format!(
        "{MAGIC}\ndims {} {} {}\nspacing {} {} {}\ndtype {}\nkind {kind}\n\n",
        dims[0],
        dims[1],
        dims[2],
        spacing[0],
        spacing[1],
        spacing[2],
        dtype.name()
    )
}

pub fn encode_intensity(vol: &Volume) -> Vec<u8> {
    let mut out = header(vol.dims(), vol.spacing(), MvolDtype::F32, "intensity").into_bytes();
    out.reserve(vol.len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let mut out = header(labels.dims(), labels.spacing(), MvolDtype::U8, "labels").into_bytes();
    out.extend_from_slice(labels.data());
    out
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}

/// Writes any volume; intensities as f32, labels as u8.
pub fn save_mvol(vol: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = match vol {
        AnyVolume::Intensity(v) => encode_intensity(v),
        AnyVolume::Labels(l) => encode_labels(l),
    };
    write(path.as_ref(), bytes)
}

/// Writes a label map or binary mask (u8, kind labels).
pub fn save_mask(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), encode_labels(labels))
}

pub fn load_mvol(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_mvol(&bytes).map_err(|e| e.in_file(path))
}

/// Loads MVOL, or uncompressed NIfTI-1 for `.nii` / `.nii.gz` paths.
pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        super::load_nifti(path).map(AnyVolume::Intensity)
    } else {
        load_mvol(path)
    }
}

pub fn decode_mvol(bytes: &[u8]) -> Result<AnyVolume> {
    let mut pos = 0usize;
    let mut next_line = |what: &str| -> Result<(u64, String)> {
        let start = pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start as u64, format!("truncated header: missing {what} line")))?;
        pos = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| Error::format(start as u64, "header is not UTF-8"))?;
        Ok((start as u64, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line("magic")?;
    if magic != MAGIC {
        return Err(Error::format(off, format!("bad magic {magic:?}, expected {MAGIC}")));
    }
    let fields = |off: u64, line: &str, key: &str, n: usize| -> Result<Vec<String>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::format(off, format!("expected `{key}` line, got {line:?}")));
        }
        let vals: Vec<String> = parts.map(str::to_string).collect();
        if vals.len() != n {
            return Err(Error::format(off, format!("`{key}` needs {n} values, got {}", vals.len())));
        }
        Ok(vals)
    };

    let (off, line) = next_line("dims")?;
    let dims_v = fields(off, &line, "dims", 3)?;
    let mut dims = [0usize; 3];
    for (d, s) in dims.iter_mut().zip(&dims_v) {
        *d = s.parse().map_err(|_| Error::format(off, format!("bad dimension {s:?}")))?;
    }
    let (off, line) = next_line("spacing")?;
    let sp_v = fields(off, &line, "spacing", 3)?;
    let mut spacing = [0f64; 3];
    for (d, s) in spacing.iter_mut().zip(&sp_v) {
        *d = s.parse().map_err(|_| Error::format(off, format!("bad spacing {s:?}")))?;
    }
    let (off, line) = next_line("dtype")?;
    let dtype = match fields(off, &line, "dtype", 1)?[0].as_str() {
        "i16" => MvolDtype::I16,
        "f32" => MvolDtype::F32,
        "u8" => MvolDtype::U8,
        other => return Err(Error::format(off, format!("unsupported dtype {other:?}"))),
    };
    let (off, line) = next_line("kind")?;
    let kind = fields(off, &line, "kind", 1)?.remove(0);
    if kind != "intensity" && kind != "labels" {
        return Err(Error::format(off, format!("unknown kind {kind:?}")));
    }
    let (off, blank) = next_line("blank separator")?;
    if !blank.is_empty() {
        return Err(Error::format(off, "expected a blank line after the header"));
    }

    let count: usize = dims.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != count * dtype.size() {
        return Err(Error::format(
            pos as u64,
            format!(
                "data length {} bytes does not match dims {dims:?} x {} bytes",
                payload.len(),
                dtype.size()
            ),
        ));
    }
    let wrap = |e: Error| match e {
        Error::Config(m) => Error::format(0, m),
        other => other,
    };
    if kind == "labels" {
        if dtype != MvolDtype::U8 {
            return Err(Error::format(0, "label volumes must use dtype u8"));
        }
        let labels = Grid3::new(dims, spacing, payload.to_vec()).map_err(wrap)?;
        labels.check_labels().map_err(|e| Error::format(pos as u64, e.to_string()))?;
        return Ok(AnyVolume::Labels(labels));
    }
    let data: Vec<f32> = match dtype {
        MvolDtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        MvolDtype::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        MvolDtype::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Ok(AnyVolume::Intensity(Grid3::new(dims, spacing, data).map_err(wrap)?))
}

//! Binary checkpoint format.
//!
//! ```text
//! "LSNET1"  u32 version  u32 tensor_count
//! tensor_count x { u16 name_len, name (UTF-8), u8 dtype, u8 ndim, u32 dims[ndim], data (LE) }
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8. The first entry is `__spec__`, a u8
//! blob holding the [`NetSpec`] as `key=value` text. Parameter tensors follow
//! in construction order, then batch-norm running statistics.

use std::collections::BTreeMap;
use std::path::Path;

use super::{build_network, NetSpec, Network, Param};
use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::tensor::{Dims, Real, Tensor};

pub const MAGIC: &[u8; 6] = b"LSNET1";
pub const VERSION: u32 = 1;
pub const SPEC_ENTRY: &str = "__spec__";
const DTYPE_U8: u8 = 2;

fn push_entry(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], payload: impl FnOnce(&mut Vec<u8>)) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    payload(out);
}

/// Vectors are stored 1-D, kernels 4-D.
fn logical_dims(d: Dims) -> Vec<usize> {
    if d.n == 1 && d.h == 1 && d.w == 1 {
        vec![d.c]
    } else {
        vec![d.n, d.c, d.h, d.w]
    }
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count = 0u32;
    let spec = net.spec().to_text();
    push_entry(&mut body, SPEC_ENTRY, DTYPE_U8, &[spec.len()], |o| {
        o.extend_from_slice(spec.as_bytes())
    });
    count += 1;
    for (name, p) in net.params() {
        push_entry(&mut body, &name, T::DTYPE_CODE, &logical_dims(p.value.dims()), |o| {
            p.value.data().iter().for_each(|v| v.write_le(o))
        });
        count += 1;
    }
    for (name, stats) in net.running_stats() {
        if let Some(rs) = stats {
            for (suffix, v) in [("running_mean", &rs.mean), ("running_var", &rs.var)] {
                push_entry(&mut body, &format!("{name}.{suffix}"), T::DTYPE_CODE, &[v.len()], |o| {
                    v.iter().for_each(|x| x.write_le(o))
                });
                count += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(body.len() + 14);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net)).map_err(|e| Error::from(e).in_file(path))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_checkpoint(&bytes).map_err(|e| e.in_file(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated file: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct Entry<'a> {
    offset: u64,
    dtype: u8,
    dims: Vec<usize>,
    data: &'a [u8],
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected LSNET1"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(6, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = cur.u32("tensor count")?;
    let mut entries: BTreeMap<String, Entry<'_>> = BTreeMap::new();
    for _ in 0..count {
        let offset = cur.pos as u64;
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(offset + 2, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = cur.u8("dtype")?;
        let elem = match dtype {
            0 => 4,
            1 => 8,
            DTYPE_U8 => 1,
            other => return Err(Error::format(cur.pos as u64 - 1, format!("unknown dtype code {other}"))),
        };
        let ndim = cur.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32("dims")? as usize);
        }
        let len: usize = dims.iter().product();
        let data = cur.take(len * elem, &format!("data of {name}"))?;
        if entries.insert(name.clone(), Entry { offset, dtype, dims, data }).is_some() {
            return Err(Error::format(offset, format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after last tensor"));
    }

    let spec_entry = entries
        .remove(SPEC_ENTRY)
        .ok_or_else(|| Error::format(14, "missing __spec__ metadata"))?;
    if spec_entry.dtype != DTYPE_U8 {
        return Err(Error::format(spec_entry.offset, "__spec__ must be a u8 blob"));
    }
    let spec_text = std::str::from_utf8(spec_entry.data).map_err(|_| Error::format(spec_entry.offset, "__spec__ is not UTF-8"))?;
    let spec = NetSpec::from_text(spec_text).map_err(|e| Error::format(spec_entry.offset, e.to_string()))?;

    let values = |e: &Entry<'_>, name: &str, expect: Vec<usize>| -> Result<Vec<T>> {
        if e.dtype != T::DTYPE_CODE {
            return Err(Error::format(
                e.offset,
                format!(
                    "{name}: dtype code {} does not match the requested precision ({})",
                    e.dtype,
                    T::DTYPE_CODE
                ),
            ));
        }
        if e.dims != expect {
            return Err(Error::format(e.offset, format!("{name}: dims {:?}, expected {expect:?}", e.dims)));
        }
        Ok(e.data.chunks_exact(T::BYTES).map(T::read_le).collect())
    };

    let mut net = build_network::<T>(&spec, 0)?;
    for (name, p) in net.params_mut() {
        let e = entries
            .remove(&name)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing parameter {name}")))?;
        let dims = p.value.dims();
        let v = values(&e, &name, logical_dims(dims))?;
        *p = Param::new(Tensor::from_vec(dims, v)?);
    }
    let widths: Vec<usize> = net
        .params()
        .iter()
        .filter(|(n, _)| n.ends_with(".bn.gamma"))
        .map(|(_, p)| p.value.len())
        .collect();
    for ((name, slot), width) in net.running_stats_mut().into_iter().zip(widths) {
        let (mk, vk) = (format!("{name}.running_mean"), format!("{name}.running_var"));
        match (entries.remove(&mk), entries.remove(&vk)) {
            (None, None) => *slot = None,
            (Some(m), Some(v)) => {
                *slot = Some(RunningStats {
                    mean: values(&m, &mk, vec![width])?,
                    var: values(&v, &vk, vec![width])?,
                });
            }
            (Some(e), None) | (None, Some(e)) => {
                return Err(Error::format(
                    e.offset,
                    format!("{name}: running mean and variance must both be present"),
                ))
            }
        }
    }
    if let Some((name, e)) = entries.iter().next() {
        return Err(Error::format(e.offset, format!("unexpected tensor {name}")));
    }
    Ok(net)
}

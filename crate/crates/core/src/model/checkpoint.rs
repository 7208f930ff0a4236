//! Binary parameter file: `b"AXPS"`, `u32` version, then one record per
//! tensor until end of file. A record is the name length (`u32`), the UTF-8
//! name, the rank (`u32`), each dimension (`u32`) and the values as
//! little-endian `f64`. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AXPS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_params<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected \"AXPS\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let mut params = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format("checkpoint", format!("non-UTF-8 name at byte {}", r.pos)))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(&shape, data)?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate record {name:?}")));
        }
    }
    Ok(params)
}

pub fn save_params<T: Scalar>(path: impl AsRef<Path>, params: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

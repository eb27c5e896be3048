//! Binary parameter file.
//!
//! Layout (little-endian): magic `b"DABP"`, `u32` version, `u32` parameter
//! count, then per parameter a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` `u64` dims and `numel` `f32` values.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub const PARAM_MAGIC: [u8; 4] = *b"DABP";
pub const PARAM_VERSION: u32 = 1;

pub fn write_params<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let t = store.value(id);
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for &v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Corruption(format!("parameter file truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Corruption(format!("parameter file truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a parameter file into a fresh store (names and shapes as recorded).
pub fn read_params<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("parameter file header: {e}")))?;
    if magic != PARAM_MAGIC {
        return Err(Error::Format(format!("bad parameter file magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != PARAM_VERSION {
        return Err(Error::Unsupported(format!(
            "parameter file version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Corruption(format!("parameter name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Corruption(format!("parameter name truncated: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Corruption(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Corruption(format!("parameter {name} payload truncated: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

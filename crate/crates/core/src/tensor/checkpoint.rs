//! `RDTC` parameter files: magic, version, count, then per parameter the
//! name, rank, dims and little-endian `f32` data. Entries are written in
//! name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::format::{len_u32, put_f32s, put_u32, ByteReader, FormatError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDTC";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(params.len())?);
    for (name, t) in params {
        put_u32(&mut out, len_u32(name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.rank())?);
        for &d in t.shape() {
            put_u32(&mut out, len_u32(d)?);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.header(CHECKPOINT_MAGIC, "RDTC", VERSION)?;
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FormatError::Malformed(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(&dims, data).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &BTreeMap<String, Tensor<f32>>) -> Result<(), FormatError> {
    fs::write(path, write_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>, FormatError> {
    read_checkpoint(&fs::read(path)?)
}

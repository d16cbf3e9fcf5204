//! Named-tensor container.
//!
//! Layout (little-endian):
//! ```text
//! "GTLC" | version: u32 | count: u32
//! count × { name_len: u32 | name: utf-8 | rows: u32 | cols: u32 | rows*cols × f32 }
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GTLC";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor2<f32>)]) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn tensors_to_bytes(tensors: &[(String, Tensor2<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensors(&mut out, tensors).expect("writing to a Vec cannot fail");
    out
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ck(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a whole container; any defect fails the entire read.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor2<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ck("truncated header"))?;
    if &magic != TENSOR_MAGIC {
        return Err(ck("bad magic, not a GTLC tensor container"));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(ck(format!("unsupported tensor format version {version}")));
    }
    let count = read_u32(r, "tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for i in 0..count {
        let len = read_u32(r, "name length")? as usize;
        if len > 4096 {
            return Err(ck(format!("tensor {i}: implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| ck(format!("tensor {i}: truncated name")))?;
        let name = String::from_utf8(name).map_err(|_| ck(format!("tensor {i}: name is not utf-8")))?;
        let rows = read_u32(r, "rows")? as usize;
        let cols = read_u32(r, "cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= 1 << 31)
            .ok_or_else(|| ck(format!("tensor {name}: implausible shape {rows}x{cols}")))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| ck(format!("tensor {name}: truncated data")))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor2::from_vec(rows, cols, data).map_err(|e| ck(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| ck(e.to_string()))? != 0 {
        return Err(ck("trailing bytes after last tensor"));
    }
    Ok(out)
}

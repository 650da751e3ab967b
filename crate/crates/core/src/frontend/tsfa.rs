//! `TSFA` grid files: magic, `u32` version, `u32` rows, `u32` cols, then
//! `rows·cols` little-endian `f32` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TSFA_MAGIC: &[u8; 4] = b"TSFA";
pub const TSFA_VERSION: u32 = 1;

pub fn write_tsfa(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != rows * cols {
        return Err(Error::shape(
            "write_tsfa",
            format!("{rows}×{cols} grid needs {} values, got {}", rows * cols, values.len()),
        ));
    }
    let mut buf = Vec::with_capacity(16 + 4 * values.len());
    buf.extend_from_slice(TSFA_MAGIC);
    buf.extend_from_slice(&TSFA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a grid as a `rows×cols` tensor.
pub fn read_tsfa(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("file shorter than the TSFA header"));
    }
    if &bytes[..4] != TSFA_MAGIC {
        return Err(fail("bad magic bytes, expected TSFA"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != TSFA_VERSION {
        return Err(fail(&format!("unsupported TSFA version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(fail(&format!(
            "{rows}×{cols} grid needs {} payload bytes, found {}",
            4 * rows * cols,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![rows, cols], data).map_err(|_| fail("empty grid"))
}

//! The VTEN single-tensor file format.
//!
//! Layout, all integers little-endian: magic `VTEN`, version `u32 = 1`,
//! dtype `u8` (`0` = f32), rank `u32`, `rank` dims as `u32`, then the
//! row-major `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// A little-endian cursor whose errors carry the absolute byte offset.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        format_err(at, msg)
    }
}

/// Decode one tensor record starting at `cursor.pos`.
pub(crate) fn decode_at(c: &mut Cursor<'_>) -> Result<Tensor> {
    let start = c.pos;
    if c.take(4, "magic")? != MAGIC {
        return Err(c.err(start, "bad magic: expected \"VTEN\""));
    }
    let at = c.pos;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(c.err(at, format!("unsupported VTEN version {version}, expected {VERSION}")));
    }
    let at = c.pos;
    let dtype = c.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(c.err(at, format!("unsupported dtype code {dtype}, only 0 (f32) is known")));
    }
    let rank = c.u32("rank")? as usize;
    let at = c.pos;
    if rank > 16 {
        return Err(c.err(at - 4, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(c.u32("dims")? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| c.err(at, "dims overflow"))?;
    let payload = c.take(n, "payload")?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Tensor::from_vec(dims, data)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor::new(bytes, 0);
    let t = decode_at(&mut c)?;
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, format!("{} trailing bytes after payload", bytes.len() - c.pos)));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"VTEN");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..13], &[2, 0, 0, 0]);
        assert_eq!(&b[13..21], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn errors_carry_offsets() {
        let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        match decode(&b[..b.len() - 2]) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 17);
                assert!(msg.contains("payload"));
            }
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        match decode(&bad) {
            Err(Error::Format { offset: 0, msg }) => assert!(msg.contains("VTEN")),
            other => panic!("{other:?}"),
        }
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Format { offset: 4, .. })));
        let mut dt = b.clone();
        dt[8] = 1;
        assert!(matches!(decode(&dt), Err(Error::Format { offset: 8, .. })));
        let mut extra = b;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { offset: 29, .. })));
    }
}

//! `VRW1` weight files.
//!
//! Layout (all integers little-endian): magic `VRW1`, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` × `u32`
//! dims and the `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VRW1";

pub fn encode_weights(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated weight file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::format(path, "bad magic, expected VRW1"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)));
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save_weights(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_weights(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::from_slice(&[2], &[1.0, -2.0]);
        let buf = encode_weights(&[("ab".into(), t)]);
        let mut expect = b"VRW1".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(1);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn round_trip() {
        let ts = vec![
            ("conv.w".to_string(), Tensor::from_slice(&[2, 1, 1, 1], &[0.5, 0.25])),
            ("s".to_string(), Tensor::scalar(3.0)),
        ];
        let back = decode_weights(&encode_weights(&ts), Path::new("mem")).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn bad_magic_names_file() {
        let err = decode_weights(b"XXXX\0\0\0\0", Path::new("w.vrw")).unwrap_err();
        assert!(err.to_string().contains("w.vrw"));
    }

    #[test]
    fn truncated_is_rejected() {
        let buf = encode_weights(&[("a".into(), Tensor::scalar(1.0))]);
        assert!(decode_weights(&buf[..buf.len() - 1], Path::new("t")).is_err());
    }
}

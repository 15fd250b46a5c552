//! Little-endian record encoding shared by the checkpoint and episode containers.
//!
//! Every container is `magic (4) | version (u32) | body | SHA-256(magic..body) (32)`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    /// Appends the integrity trailer and returns the finished container.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Verifies magic, version and trailer; returns a reader positioned after the version.
    pub fn open(data: &'a [u8], path: &'a Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.into() };
        if data.len() < 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &data[..4] != magic {
            return Err(corrupt("bad magic"));
        }
        let (body, trailer) = data.split_at(data.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let mut r = Self { data: body, pos: 4, path };
        let v = r.u32()?;
        if v != version {
            return Err(corrupt(&format!("unsupported format version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corrupt { path: self.path.to_path_buf(), reason: "unexpected end of data".into() });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    pub fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), reason: reason.into() }
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

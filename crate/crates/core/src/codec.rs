//! Little-endian byte cursor and framing shared by the binary formats.
//!
//! Every file is `magic (4) | version u32 | body | checksum u64`, where the
//! checksum covers all bytes before it.

use crate::checksum::digest64;
use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: [u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Writer { buf }
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

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = digest64(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

/// Checks magic, version and checksum, and returns a reader over the body.
pub(crate) fn open<'a>(
    kind: &'static str,
    data: &'a [u8],
    magic: [u8; 4],
    version: u32,
    min_body: usize,
) -> Result<Reader<'a>> {
    if data.len() < 8 {
        return Err(Error::Truncated { kind, detail: format!("{} bytes, no header", data.len()) });
    }
    if data[..4] != magic {
        return Err(Error::BadMagic { kind, expected: magic });
    }
    let found = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::VersionMismatch { kind, found, expected: version });
    }
    if data.len() < 8 + min_body + 8 {
        return Err(Error::Truncated {
            kind,
            detail: format!("{} bytes is shorter than the fixed header", data.len()),
        });
    }
    let split = data.len() - 8;
    let stored = u64::from_le_bytes(data[split..].try_into().unwrap());
    let computed = digest64(&data[..split]);
    if stored != computed {
        return Err(Error::Checksum { kind, stored, computed });
    }
    Ok(Reader { kind, data: &data[..split], pos: 8 })
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    /// Bytes after the cursor, without consuming them.
    pub fn rest(&self) -> &'a [u8] {
        &self.data[self.pos..]
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                kind: self.kind,
                detail: format!("needed {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::Malformed { kind: self.kind, detail: detail.into() }
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

//! Binary container shared by checkpoints and patch exports.
//!
//! Layout (all integers little-endian):
//! `b"ILLK"`, `u32` version, `u32` section-name length, section name bytes,
//! `u64` payload length, payload.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ILLK";
pub const VERSION: u32 = 1;

pub fn wrap(section: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 24 + section.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(section.len() as u32).to_le_bytes());
    out.extend_from_slice(section.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Checks magic, version and section name; returns the payload.
pub fn unwrap<'a>(bytes: &'a [u8], section: &str) -> Result<&'a [u8]> {
    let mut r = Reader::new(bytes, "ILLK container");
    if r.take(4)? != MAGIC {
        return Err(Error::format("ILLK container", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("ILLK container", format!("unsupported version {version}")));
    }
    let name = r.string()?;
    if name != section {
        return Err(Error::format(
            "ILLK container",
            format!("section {name:?}, expected {section:?}"),
        ));
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    if !r.is_done() {
        return Err(Error::format("ILLK container", "trailing bytes after payload"));
    }
    Ok(payload)
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
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

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.what, "string is not UTF-8"))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_unwrap() {
        let b = wrap("patches", &[1, 2, 3]);
        assert_eq!(&b[..4], b"ILLK");
        assert_eq!(unwrap(&b, "patches").unwrap(), &[1, 2, 3]);
        assert!(unwrap(&b, "checkpoint").is_err());
        assert!(unwrap(&b[..b.len() - 1], "patches").is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(unwrap(&bad, "patches").is_err());
    }
}

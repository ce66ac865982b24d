//! Byte-level helpers shared by every on-disk format in the crate.
//!
//! All formats follow the same frame: a 4-byte magic, a `u16` version, a
//! little-endian payload, and a trailing FNV-1a 64 checksum over everything
//! before it. Readers verify the checksum before parsing and demand that the
//! payload is consumed exactly, so any truncation, bit flip, or trailing
//! garbage surfaces as [`Error::Corrupt`] instead of bad data or a panic.

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a 64-bit hash. Integrity checks and weight checksums, not crypto.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Checksum of a slice of `f64` values via their little-endian bit patterns.
pub fn fnv64_f64(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Append-only little-endian writer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    /// Start a frame with its magic and version.
    pub fn frame(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn bytes(&mut self, bs: &[u8]) {
        self.buf.extend_from_slice(bs);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Seal the frame: append the checksum and return the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let h = fnv64(&self.buf);
        self.u64(h);
        self.buf
    }
}

/// Checked little-endian reader over a sealed frame.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Open a frame: verify overall length, checksum, magic, and version.
    pub fn frame(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        if bytes.len() < 4 + 2 + 8 {
            return Err(Error::Corrupt("file shorter than frame header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv64(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let mut m = [0u8; 4];
        m.copy_from_slice(r.take(4)?);
        if &m != magic {
            return Err(Error::Corrupt(format!(
                "bad magic {:02x?}, expected {:02x?}",
                m, magic
            )));
        }
        let v = r.u16()?;
        if v != version {
            return Err(Error::Corrupt(format!(
                "unsupported version {v}, expected {version}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!(
                "unexpected end of data at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count that must be answerable by the bytes left (`per_item` bytes
    /// each); rejects absurd counts before any allocation.
    pub fn count(&mut self, per_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        let left = self.buf.len() - self.pos;
        if per_item > 0 && n > left / per_item {
            return Err(Error::Corrupt(format!(
                "count {n} exceeds remaining data ({left} bytes)"
            )));
        }
        Ok(n)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }

    /// Close the frame: every payload byte must have been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 4] = b"TEST";

    fn sample() -> Vec<u8> {
        let mut w = Writer::frame(MAGIC, 1);
        w.u32(7);
        w.f64(3.5);
        w.str("hello");
        w.finish()
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let mut r = Reader::frame(&bytes, MAGIC, 1).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 3.5);
        assert_eq!(r.str().unwrap(), "hello");
        r.finish().unwrap();
    }

    #[test]
    fn every_single_bit_flip_detected() {
        let bytes = sample();
        for byte in 0..bytes.len() {
            for bit in 0..8 {
                let mut c = bytes.clone();
                c[byte] ^= 1 << bit;
                let r = Reader::frame(&c, MAGIC, 1);
                assert!(r.is_err(), "flip at byte {byte} bit {bit} not detected");
            }
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample();
        for len in 0..bytes.len() {
            assert!(Reader::frame(&bytes[..len], MAGIC, 1).is_err());
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let bytes = sample();
        assert!(Reader::frame(&bytes, b"NOPE", 1).is_err());
        assert!(Reader::frame(&bytes, MAGIC, 2).is_err());
    }

    #[test]
    fn trailing_garbage_detected() {
        let bytes = sample();
        let mut r = Reader::frame(&bytes, MAGIC, 1).unwrap();
        let _ = r.u32().unwrap();
        assert!(r.finish().is_err());
    }

    #[test]
    fn count_guard_rejects_absurd_allocation() {
        let mut w = Writer::frame(MAGIC, 1);
        w.u32(u32::MAX);
        let bytes = w.finish();
        let mut r = Reader::frame(&bytes, MAGIC, 1).unwrap();
        assert!(r.count(8).is_err());
    }
}

//! Canonical byte encoding shared by ledger payloads, credentials and wire frames.
//!
//! Fields are concatenated in declared order. Integers are big-endian, floats are
//! their IEEE-754 bit pattern (big-endian), and variable-length fields carry a
//! length prefix. Ledger structures use 32-bit prefixes; wire frames use 16-bit
//! prefixes so the M1 layout stays compact.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input ended before the field was complete")]
    Truncated,
    #[error("trailing bytes after the last field")]
    Trailing,
    #[error("length prefix does not fit the field")]
    BadLength,
    #[error("string field is not valid UTF-8")]
    BadUtf8,
    #[error("unknown enum tag {0:#04x}")]
    UnknownTag(u8),
    #[error("float field is not finite")]
    NonFinite,
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// 32-bit length prefix followed by the bytes.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field larger than 4 GiB");
        self.u32(len).raw(bytes)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    /// 16-bit length prefix followed by the bytes. Panics above 65535 bytes.
    pub fn short_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u16::try_from(bytes.len()).expect("short field larger than 64 KiB");
        self.u16(len).raw(bytes)
    }

    pub fn short_str(&mut self, s: &str) -> &mut Self {
        self.short_bytes(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        let v = f64::from_bits(self.u64()?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DecodeError::NonFinite)
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.bytes()?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| DecodeError::BadUtf8)
    }

    pub fn short_bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    pub fn short_string(&mut self) -> Result<String, DecodeError> {
        let raw = self.short_bytes()?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| DecodeError::BadUtf8)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Trailing)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut w = Writer::new();
        w.u16(0x0102).u32(0x0304_0506).u64(7);
        assert_eq!(w.finish(), [1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7]);
    }

    #[test]
    fn reader_rejects_short_and_trailing_input() {
        let mut r = Reader::new(&[0, 0, 0, 5, b'a']);
        assert_eq!(r.bytes(), Err(DecodeError::Truncated));

        let mut r = Reader::new(&[0, 1, b'a', b'b']);
        assert_eq!(r.short_string().unwrap(), "a");
        assert_eq!(r.finish(), Err(DecodeError::Trailing));
    }

    #[test]
    fn non_finite_floats_are_rejected() {
        let mut w = Writer::new();
        w.f64(f64::NAN);
        let bytes = w.finish();
        assert_eq!(Reader::new(&bytes).f64(), Err(DecodeError::NonFinite));
    }
}

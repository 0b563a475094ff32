// SPDX-License-Identifier: Apache-2.0

//! Canonical byte framing shared by every hashed or signed structure.
//!
//! All integers are big-endian. Variable-length byte strings and lists carry
//! an 8-byte big-endian length prefix. Optional values are a one-byte tag
//! (`0` absent, `1` present) followed by the value.

use crate::crypto::Digest;

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
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

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
        self
    }

    /// Raw bytes without a length prefix; only for fixed-width fields.
    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.raw(d.as_bytes())
    }

    pub fn len_prefix(&mut self, n: usize) -> &mut Self {
        self.u64(n as u64)
    }

    pub fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(x) => self.u8(1).u64(x),
        }
    }

    pub fn opt_bytes(&mut self, v: Option<&[u8]>) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(x) => self.u8(1).bytes(x),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Types with a single canonical serialization used for hashing and signing.
pub trait Canonical {
    fn encode(&self, enc: &mut Encoder);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(self);
    }
}

impl<T: Canonical> Canonical for [T] {
    fn encode(&self, enc: &mut Encoder) {
        enc.len_prefix(self.len());
        for item in self {
            item.encode(enc);
        }
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, enc: &mut Encoder) {
        self.as_slice().encode(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_is_big_endian_and_length_prefixed() {
        let mut enc = Encoder::new();
        enc.u32(1).bytes(b"ab").opt_u64(None).opt_u64(Some(2));
        assert_eq!(
            enc.finish(),
            vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 2, b'a', b'b', 0, 1, 0, 0, 0, 0, 0, 0, 0, 2]
        );
    }
}

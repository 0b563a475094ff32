// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }

    /// First sixteen hex digits, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }

    /// First eight bytes as a big-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Domain-separated hash: `SHA-256(len(tag) as u64 BE || tag || payload)`.
pub fn hash(tag: &[u8], payload: &[u8]) -> Digest {
    hash_parts(tag, &[payload])
}

/// Same framing as [`hash`], with the payload given as consecutive slices.
pub fn hash_parts(tag: &[u8], parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_be_bytes());
    h.update(tag);
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Interprets the digest as a 256-bit big-endian unsigned integer and
/// reduces it modulo `m`.
pub fn digest_mod(d: &Digest, m: u64) -> u64 {
    assert!(m > 0, "modulus must be positive");
    let m = m as u128;
    d.0.iter().fold(0u128, |acc, &b| ((acc << 8) | b as u128) % m) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(hash(b"x", b"payload"), hash(b"x", b"payload"));
    }

    #[test]
    fn tag_separates_domains() {
        assert_ne!(hash(b"x", b"payload"), hash(b"y", b"payload"));
        // moving a byte between tag and payload changes the framing
        assert_ne!(hash(b"ab", b"c"), hash(b"a", b"bc"));
    }

    #[test]
    fn empty_tag_and_payload_is_sha256_of_zero_length_prefix() {
        // sha256(00 00 00 00 00 00 00 00), computed with python hashlib
        assert_eq!(
            hash(b"", b"").to_hex(),
            "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc"
        );
    }

    #[test]
    fn parts_match_concatenation() {
        assert_eq!(hash_parts(b"t", &[b"ab", b"cd"]), hash(b"t", b"abcd"));
    }

    #[test]
    fn digest_mod_is_big_endian() {
        let mut d = [0u8; 32];
        d[31] = 17;
        assert_eq!(digest_mod(&Digest(d), 5), 2);
        d[30] = 1; // 256 + 17 = 273
        assert_eq!(digest_mod(&Digest(d), 1000), 273);
        assert_eq!(digest_mod(&Digest::ZERO, 7), 0);
    }

    #[test]
    fn hex_roundtrip_and_serde() {
        let d = hash(b"t", b"p");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }
}

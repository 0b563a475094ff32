// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::{hash, hash_parts, CryptoError, Digest};

/// 32-byte seed for a deterministic word stream.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Seed(pub Digest);

impl Seed {
    pub const ZERO: Seed = Seed(Digest::ZERO);

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn stream(&self) -> SeededStream {
        SeededStream::new(*self)
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({:?})", self.0)
    }
}

/// `hash("seed", lp(tag_1) || ... || lp(tag_k) || randomness)`.
pub fn derive_seed(tags: &[&str], randomness: &[u8]) -> Result<Seed, CryptoError> {
    if randomness.is_empty() {
        return Err(CryptoError::EmptyRandomness);
    }
    let mut payload = Vec::with_capacity(randomness.len() + tags.len() * 16);
    for tag in tags {
        payload.extend_from_slice(&(tag.len() as u64).to_be_bytes());
        payload.extend_from_slice(tag.as_bytes());
    }
    payload.extend_from_slice(randomness);
    Ok(Seed(hash(b"seed", &payload)))
}

/// Word `j` of the stream: first 8 bytes (big-endian) of
/// `hash("stream", seed || j as u64 BE)`.
pub fn stream_word(seed: &Seed, j: u64) -> u64 {
    hash_parts(b"stream", &[seed.as_bytes(), &j.to_be_bytes()]).prefix_u64()
}

/// Infinite reproducible stream of 64-bit words.
#[derive(Debug, Clone)]
pub struct SeededStream {
    seed: Seed,
    counter: u64,
}

impl SeededStream {
    pub fn new(seed: Seed) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_word(&mut self) -> u64 {
        let w = stream_word(&self.seed, self.counter);
        self.counter += 1;
        w
    }

    /// Uniform draw in `[0, bound)` by rejection: words at or above
    /// `floor(2^64 / bound) * bound` are discarded.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let b = bound as u128;
        let limit = ((1u128 << 64) / b) * b;
        loop {
            let w = self.next_word() as u128;
            if w < limit {
                return (w % b) as u64;
            }
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform big integer in `[0, bound)`, rejection-sampled on the bit
    /// length of `bound`.
    pub fn next_biguint_below(&mut self, bound: &BigUint) -> BigUint {
        assert!(bound > &BigUint::from(0u32), "bound must be positive");
        let bits = bound.bits();
        let words = bits.div_ceil(64) as usize;
        let excess = (words as u64) * 64 - bits;
        loop {
            let mut digits: Vec<u64> = (0..words).map(|_| self.next_word()).collect();
            // most significant word last in little-endian digit order
            if excess > 0 {
                digits[words - 1] >>= excess;
            }
            let v = BigUint::from_slice(
                &digits
                    .iter()
                    .flat_map(|d| [(*d & 0xffff_ffff) as u32, (*d >> 32) as u32])
                    .collect::<Vec<_>>(),
            );
            if &v < bound {
                return v;
            }
        }
    }
}

impl Iterator for SeededStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.next_word())
    }
}

/// Fisher-Yates from the last index down to 1, drawing `j` in `[0, i]` with
/// [`SeededStream::next_below`].
pub fn shuffle_in_place<T>(stream: &mut SeededStream, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn fisher_yates_shuffle<T: Clone>(seed: &Seed, items: &[T]) -> Vec<T> {
    let mut out = items.to_vec();
    shuffle_in_place(&mut seed.stream(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn derive_seed_is_deterministic_and_tag_sensitive() {
        let r = [7u8; 32];
        let a = derive_seed(&["collector", "cluster"], &r).unwrap();
        assert_eq!(a, derive_seed(&["collector", "cluster"], &r).unwrap());
        assert_ne!(a, derive_seed(&["execution", "chunk"], &r).unwrap());
        assert_ne!(
            derive_seed(&["ab"], &r).unwrap(),
            derive_seed(&["a", "b"], &r).unwrap()
        );
    }

    #[test]
    fn derive_seed_rejects_empty_randomness() {
        assert_eq!(derive_seed(&["x"], &[]), Err(CryptoError::EmptyRandomness));
    }

    #[test]
    fn same_seed_same_thousand_words() {
        let s = derive_seed(&["t"], b"r").unwrap();
        let a: Vec<u64> = s.stream().take(1000).collect();
        let b: Vec<u64> = s.stream().take(1000).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn trivial_shuffles() {
        let empty: Vec<u8> = vec![];
        assert!(fisher_yates_shuffle(&Seed::ZERO, &empty).is_empty());
        assert_eq!(fisher_yates_shuffle(&Seed::ZERO, &["A"]), vec!["A"]);
    }

    #[test]
    fn biguint_draw_in_range() {
        let bound = BigUint::from(1439u32);
        let mut s = Seed::ZERO.stream();
        for _ in 0..500 {
            assert!(s.next_biguint_below(&bound) < bound);
        }
    }

    proptest! {
        #[test]
        fn shuffle_is_a_permutation(items in proptest::collection::vec(any::<u16>(), 0..1000), r in any::<[u8; 8]>()) {
            let seed = derive_seed(&["prop"], &r).unwrap();
            let mut out = fisher_yates_shuffle(&seed, &items);
            let mut sorted = items.clone();
            out.sort_unstable();
            sorted.sort_unstable();
            prop_assert_eq!(out, sorted);
        }

        #[test]
        fn next_below_in_range(bound in 1u64..u64::MAX, r in any::<[u8; 4]>()) {
            let mut s = derive_seed(&["nb"], &r).unwrap().stream();
            prop_assert!(s.next_below(bound) < bound);
        }
    }
}

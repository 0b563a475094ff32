// SPDX-License-Identifier: Apache-2.0

//! Discrete-log Shamir threshold signatures.
//!
//! A share signs as `sigma_i = sk_i * e(m) mod q` and verifies as
//! `g^sigma_i == pk_i^e(m) (mod p)`. Lagrange interpolation at zero over any
//! `t + 1` shares yields `sk_G * e(m)`, so the group signature is unique per
//! `(pk_G, m)`. Publishing a share reveals `sk_i`; the scheme reproduces the
//! algebraic contract of a BLS threshold scheme but is not secure.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use super::{hash, hash_parts, CryptoError, Digest};
use crate::codec::{Canonical, Encoder};

/// Prime-order subgroup `<g>` of `Z_p^*` with order `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    pub p: BigUint,
    pub q: BigUint,
    pub g: BigUint,
}

impl GroupParams {
    pub fn new(p: BigUint, q: BigUint, g: BigUint) -> Result<Self, CryptoError> {
        if q < BigUint::from(2u32) || p <= q {
            return Err(CryptoError::InvalidGroup("need p > q >= 2"));
        }
        if g.is_zero() || g.is_one() || g >= p {
            return Err(CryptoError::InvalidGroup("generator out of range"));
        }
        if !g.modpow(&q, &p).is_one() {
            return Err(CryptoError::InvalidGroup("generator order does not divide q"));
        }
        Ok(Self { p, q, g })
    }

    /// p = 2879, q = 1439, g = 2. Small enough for exhaustive oracles.
    pub fn tiny() -> Self {
        Self::new(2879u32.into(), 1439u32.into(), 2u32.into()).expect("valid tiny group")
    }

    /// 256-bit safe prime, generator 4.
    pub fn large() -> Self {
        let p = BigUint::parse_bytes(
            b"857ac52b726574682ed1b3084f880a9315edae0375d378e3c0992fccda0b5a73",
            16,
        )
        .expect("hex");
        let q = BigUint::parse_bytes(
            b"42bd6295b932ba341768d98427c405498af6d701bae9bc71e04c97e66d05ad39",
            16,
        )
        .expect("hex");
        Self::new(p, q, 4u32.into()).expect("valid large group")
    }

    pub fn exp(&self, e: &BigUint) -> BigUint {
        self.g.modpow(e, &self.p)
    }

    pub(crate) fn inv_q(&self, x: &BigUint) -> BigUint {
        // q is prime
        x.modpow(&(&self.q - 2u32), &self.q)
    }
}

/// Returns `floor((n_s - 1) / 2)`.
pub fn compute_threshold_t(committee_size: usize) -> Result<usize, CryptoError> {
    if committee_size == 0 {
        return Err(CryptoError::EmptyCommittee);
    }
    Ok((committee_size - 1) / 2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdParams {
    pub committee_size: usize,
    pub threshold: usize,
    pub group: GroupParams,
}

impl ThresholdParams {
    pub fn new(committee_size: usize, group: GroupParams) -> Result<Self, CryptoError> {
        let threshold = compute_threshold_t(committee_size)?;
        Ok(Self { committee_size, threshold, group })
    }

    pub fn required_shares(&self) -> usize {
        self.threshold + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationVector {
    pub group_public_key: BigUint,
    /// `party_public_keys[i - 1]` belongs to party `i`.
    pub party_public_keys: Vec<BigUint>,
}

impl VerificationVector {
    pub fn party_key(&self, index: u32) -> Option<&BigUint> {
        index.checked_sub(1).and_then(|i| self.party_public_keys.get(i as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretShare {
    pub index: u32,
    pub value: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureShare {
    pub index: u32,
    #[serde(with = "biguint_hex")]
    pub value: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSignature {
    #[serde(with = "biguint_hex")]
    pub value: BigUint,
}

impl GroupSignature {
    /// Seed material for per-block pseudo-random generators.
    pub fn digest(&self) -> Digest {
        hash(b"randomness", &self.value.to_bytes_be())
    }
}

impl Canonical for GroupSignature {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.value.to_bytes_be());
    }
}

pub(crate) mod biguint_hex {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(16))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| serde::de::Error::custom("bad hex integer"))
    }
}

/// `e(m)`: `hash("tsig", m)` reduced mod q; a zero result is re-derived from
/// `m || counter` with counter = 1, 2, ...
pub fn message_exponent(group: &GroupParams, msg: &[u8]) -> BigUint {
    let reduce = |d: Digest| BigUint::from_bytes_be(d.as_bytes()) % &group.q;
    let e = reduce(hash(b"tsig", msg));
    if !e.is_zero() {
        return e;
    }
    (1u8..=u8::MAX)
        .map(|ctr| reduce(hash_parts(b"tsig", &[msg, &[ctr]])))
        .find(|e| !e.is_zero())
        .expect("some counter yields a non-zero exponent")
}

pub fn sign_with_exponent(group: &GroupParams, share: &SecretShare, e: &BigUint) -> SignatureShare {
    SignatureShare { index: share.index, value: (&share.value * e) % &group.q }
}

pub fn threshold_sign(group: &GroupParams, share: &SecretShare, msg: &[u8]) -> SignatureShare {
    sign_with_exponent(group, share, &message_exponent(group, msg))
}

/// `g^sigma_i == pk_i^e(m) (mod p)`.
pub fn verify_share(
    group: &GroupParams,
    vv: &VerificationVector,
    share: &SignatureShare,
    msg: &[u8],
) -> bool {
    let Some(pk) = vv.party_key(share.index) else {
        return false;
    };
    let e = message_exponent(group, msg);
    group.exp(&share.value) == pk.modpow(&e, &group.p)
}

/// Lagrange basis values at x = 0 for the given distinct party indices.
pub fn lagrange_coefficients_at_zero(indices: &[u32], group: &GroupParams) -> Vec<BigUint> {
    let q = &group.q;
    indices
        .iter()
        .map(|&i| {
            let mut num = BigUint::one();
            let mut den = BigUint::one();
            for &j in indices.iter().filter(|&&j| j != i) {
                // lambda_i = prod_j  j / (j - i)
                num = (num * BigUint::from(j)) % q;
                let diff = (BigUint::from(j) + q - (BigUint::from(i) % q)) % q;
                den = (den * diff) % q;
            }
            (num * group.inv_q(&den)) % q
        })
        .collect()
}

/// Recovers the group signature from at least `t + 1` shares from distinct
/// parties. Every supplied share must verify; the `t + 1` lowest indices are
/// interpolated.
pub fn threshold_recover(
    params: &ThresholdParams,
    vv: &VerificationVector,
    shares: &[SignatureShare],
    msg: &[u8],
) -> Result<GroupSignature, CryptoError> {
    let group = &params.group;
    let mut distinct: Vec<&SignatureShare> = Vec::with_capacity(shares.len());
    for s in shares {
        if s.index == 0 || s.index as usize > params.committee_size {
            return Err(CryptoError::UnknownParty(s.index));
        }
        if distinct.iter().any(|d| d.index == s.index) {
            continue;
        }
        if !verify_share(group, vv, s, msg) {
            return Err(CryptoError::InvalidShare { party: s.index });
        }
        distinct.push(s);
    }
    let need = params.required_shares();
    if distinct.len() < need {
        return Err(CryptoError::InsufficientShares { have: distinct.len(), need });
    }
    distinct.sort_by_key(|s| s.index);
    distinct.truncate(need);
    let indices: Vec<u32> = distinct.iter().map(|s| s.index).collect();
    let lambdas = lagrange_coefficients_at_zero(&indices, group);
    let value = distinct
        .iter()
        .zip(&lambdas)
        .fold(BigUint::zero(), |acc, (s, l)| (acc + &s.value * l) % &group.q);
    Ok(GroupSignature { value })
}

/// `g^sigma == pk_G^e(m) (mod p)`.
pub fn threshold_verify(group: &GroupParams, sig: &GroupSignature, group_key: &BigUint, msg: &[u8]) -> bool {
    if sig.value >= group.q {
        return false;
    }
    let e = message_exponent(group, msg);
    group.exp(&sig.value) == group_key.modpow(&e, &group.p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(v: u32) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn threshold_formula() {
        assert_eq!(compute_threshold_t(7), Ok(3));
        assert_eq!(compute_threshold_t(1), Ok(0));
        assert_eq!(compute_threshold_t(10), Ok(4));
        assert_eq!(compute_threshold_t(0), Err(CryptoError::EmptyCommittee));
    }

    #[test]
    fn tiny_field_share_arithmetic() {
        let g = GroupParams::tiny();
        let share = SecretShare { index: 1, value: n(5) };
        let s = sign_with_exponent(&g, &share, &n(7));
        assert_eq!(s.value, n(35));
        // g^sigma == pk^e
        let pk = g.exp(&n(5));
        assert_eq!(g.exp(&s.value), pk.modpow(&n(7), &g.p));
    }

    #[test]
    fn generators_have_order_q() {
        for g in [GroupParams::tiny(), GroupParams::large()] {
            assert!(g.g.modpow(&g.q, &g.p).is_one());
            assert_eq!(g.p, &g.q * 2u32 + 1u32);
        }
    }

    #[test]
    fn rejects_bad_generator() {
        assert!(GroupParams::new(n(2879), n(1439), n(1)).is_err());
        // 7 is a non-residue mod 2879, so its order is 2q
        assert!(GroupParams::new(n(2879), n(1439), n(7)).is_err());
    }

    #[test]
    fn message_exponent_nonzero_and_deterministic() {
        let g = GroupParams::tiny();
        for i in 0..3000u32 {
            let m = i.to_be_bytes();
            let e = message_exponent(&g, &m);
            assert!(!e.is_zero());
            assert!(e < g.q);
            assert_eq!(e, message_exponent(&g, &m));
        }
    }

    #[test]
    fn lagrange_weights_sum_to_one() {
        let g = GroupParams::tiny();
        let l = lagrange_coefficients_at_zero(&[1, 3, 4], &g);
        let sum = l.iter().fold(BigUint::zero(), |a, x| (a + x) % &g.q);
        assert!(sum.is_one());
    }
}

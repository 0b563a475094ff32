// SPDX-License-Identifier: Apache-2.0

//! Deterministic Schnorr signatures over a 62-bit safe-prime group.
//!
//! Staking keys identify nodes and attribute their messages. The group is far
//! too small to resist a real attacker; it only has to make honest
//! attribution checkable inside the simulator.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{digest_mod, hash, hash_parts};

/// Safe prime `p = 2q + 1`.
pub(crate) const MODULUS: u64 = 4_611_686_018_427_377_339;
/// Prime order of the quadratic-residue subgroup.
pub(crate) const ORDER: u64 = 2_305_843_009_213_688_669;
const GENERATOR: u64 = 4;

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Public staking key, the node's identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StakingKey(pub u64);

impl StakingKey {
    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }
}

impl fmt::Debug for StakingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{:016x}", self.0)
    }
}

impl fmt::Display for StakingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct StakingSignature {
    pub r: u64,
    pub s: u64,
}

impl StakingSignature {
    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.r.to_be_bytes());
        out[8..].copy_from_slice(&self.s.to_be_bytes());
        out
    }
}

#[derive(Clone)]
pub struct StakingKeyPair {
    secret: u64,
    public: StakingKey,
}

impl fmt::Debug for StakingKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StakingKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl StakingKeyPair {
    /// Derives a key pair from arbitrary seed material.
    pub fn from_seed(seed: &[u8]) -> Self {
        let secret = digest_mod(&hash(b"stake-sk", seed), ORDER - 1) + 1;
        Self { secret, public: StakingKey(pow_mod(GENERATOR, secret, MODULUS)) }
    }

    pub fn public(&self) -> StakingKey {
        self.public
    }

    pub fn sign(&self, msg: &[u8]) -> StakingSignature {
        let k = digest_mod(&hash_parts(b"stake-nonce", &[&self.secret.to_be_bytes(), msg]), ORDER - 1) + 1;
        let r = pow_mod(GENERATOR, k, MODULUS);
        let c = challenge(r, self.public, msg);
        let s = ((k as u128 + mul_mod(c, self.secret, ORDER) as u128) % ORDER as u128) as u64;
        StakingSignature { r, s }
    }
}

fn challenge(r: u64, pk: StakingKey, msg: &[u8]) -> u64 {
    digest_mod(&hash_parts(b"stake-chal", &[&r.to_be_bytes(), &pk.to_bytes(), msg]), ORDER)
}

impl StakingKey {
    /// Checks `g^s == r * pk^c (mod p)`.
    pub fn verify(&self, msg: &[u8], sig: &StakingSignature) -> bool {
        if sig.r == 0 || sig.r >= MODULUS || sig.s >= ORDER || self.0 == 0 || self.0 >= MODULUS {
            return false;
        }
        let c = challenge(sig.r, *self, msg);
        pow_mod(GENERATOR, sig.s, MODULUS) == mul_mod(sig.r, pow_mod(self.0, c, MODULUS), MODULUS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_has_prime_order() {
        assert_eq!(pow_mod(GENERATOR, ORDER, MODULUS), 1);
        assert_eq!(MODULUS, 2 * ORDER + 1);
    }

    #[test]
    fn sign_verify_roundtrip() {
        let kp = StakingKeyPair::from_seed(b"node-1");
        let sig = kp.sign(b"hello");
        assert!(kp.public().verify(b"hello", &sig));
        assert_eq!(sig, kp.sign(b"hello"), "signatures are deterministic");
        assert!(!kp.public().verify(b"hellp", &sig));
        let other = StakingKeyPair::from_seed(b"node-2");
        assert!(!other.public().verify(b"hello", &sig));
        let forged = StakingSignature { r: sig.r, s: (sig.s + 1) % ORDER };
        assert!(!kp.public().verify(b"hello", &forged));
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Sorted-key binary Merkle tree over the execution registers.
//!
//! Leaves are `hash("leaf", lp(key) || lp(value))` in ascending key order,
//! padded with `hash("empty", "")` to the next power of two; inner nodes are
//! `hash("node", left || right)`. The empty state commits to the padding leaf.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::crypto::{hash, hash_parts, Digest};

pub fn leaf_hash(key: &[u8], value: &[u8]) -> Digest {
    let mut enc = Encoder::new();
    enc.bytes(key).bytes(value);
    hash(b"leaf", &enc.finish())
}

pub fn empty_leaf() -> Digest {
    hash(b"empty", b"")
}

fn node_hash(l: &Digest, r: &Digest) -> Digest {
    hash_parts(b"node", &[l.as_bytes(), r.as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueProof {
    pub index: u64,
    pub siblings: Vec<Digest>,
}

/// Authenticated register store. The root is cached until the next write.
#[derive(Debug, Clone, Default)]
pub struct ExecutionState {
    registers: BTreeMap<Vec<u8>, Vec<u8>>,
    root: Cell<Option<Digest>>,
}

impl PartialEq for ExecutionState {
    fn eq(&self, other: &Self) -> bool {
        self.registers == other.registers
    }
}

impl Eq for ExecutionState {}

impl ExecutionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_registers(registers: BTreeMap<Vec<u8>, Vec<u8>>) -> Self {
        Self { registers, root: Cell::new(None) }
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.registers.get(key).map(Vec::as_slice)
    }

    pub fn set(&mut self, key: Vec<u8>, value: Vec<u8>) {
        self.root.set(None);
        self.registers.insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.registers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registers.is_empty()
    }

    pub fn registers(&self) -> &BTreeMap<Vec<u8>, Vec<u8>> {
        &self.registers
    }

    fn leaves(&self) -> Vec<Digest> {
        let n = self.registers.len().max(1).next_power_of_two();
        let mut leaves: Vec<Digest> = self.registers.iter().map(|(k, v)| leaf_hash(k, v)).collect();
        leaves.resize(n, empty_leaf());
        leaves
    }

    /// `StateProofGen`: the Merkle root.
    pub fn commitment(&self) -> Digest {
        if let Some(r) = self.root.get() {
            return r;
        }
        let mut level = self.leaves();
        while level.len() > 1 {
            level = level.chunks(2).map(|p| node_hash(&p[0], &p[1])).collect();
        }
        self.root.set(Some(level[0]));
        level[0]
    }

    /// `ValueProofGen`: inclusion path for a present key.
    pub fn prove(&self, key: &[u8]) -> Option<ValueProof> {
        let index = self.registers.keys().position(|k| k.as_slice() == key)?;
        let mut level = self.leaves();
        let mut siblings = Vec::new();
        let mut i = index;
        while level.len() > 1 {
            siblings.push(level[i ^ 1]);
            level = level.chunks(2).map(|p| node_hash(&p[0], &p[1])).collect();
            i /= 2;
        }
        Some(ValueProof { index: index as u64, siblings })
    }
}

/// `ValueProofVrfy`: recomputes the path from the leaf to the root.
pub fn verify_value_proof(key: &[u8], value: &[u8], proof: &ValueProof, commitment: &Digest) -> bool {
    if proof.siblings.len() >= 64 || proof.index >> proof.siblings.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(key, value);
    let mut i = proof.index;
    for s in &proof.siblings {
        acc = if i & 1 == 0 { node_hash(&acc, s) } else { node_hash(s, &acc) };
        i >>= 1;
    }
    acc == *commitment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> ExecutionState {
        let mut s = ExecutionState::new();
        for i in 0..n {
            s.set(format!("key-{i:03}").into_bytes(), vec![i as u8; i % 5 + 1]);
        }
        s
    }

    #[test]
    fn empty_state_commits_to_padding() {
        assert_eq!(ExecutionState::new().commitment(), empty_leaf());
    }

    #[test]
    fn proofs_verify() {
        let s = state(100);
        let root = s.commitment();
        for (k, v) in s.registers() {
            let p = s.prove(k).unwrap();
            assert!(verify_value_proof(k, v, &p, &root));
        }
        assert!(s.prove(b"absent").is_none());
    }

    #[test]
    fn tampering_detected() {
        let s = state(100);
        let root = s.commitment();
        let k = b"key-042".to_vec();
        let v = s.get(&k).unwrap().to_vec();
        let p = s.prove(&k).unwrap();
        let mut bad = v.clone();
        bad[0] ^= 1;
        assert!(!verify_value_proof(&k, &bad, &p, &root));
        assert!(!verify_value_proof(&k, &v, &p, &state(99).commitment()));
        let mut moved = p.clone();
        moved.index ^= 1;
        assert!(!verify_value_proof(&k, &v, &moved, &root));
    }

    #[test]
    fn root_cache_invalidated_on_write() {
        let mut s = state(4);
        let r = s.commitment();
        s.set(b"key-000".to_vec(), b"changed".to_vec());
        assert_ne!(s.commitment(), r);
        assert_eq!(s.commitment(), ExecutionState::from_registers(s.registers().clone()).commitment());
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Signed transactions and the toy script format they carry.
//!
//! A script is `u32 op_count` followed by ops, each `u8 opcode, u32 cost`
//! and opcode-specific arguments (all big-endian):
//!
//! | opcode | op               | arguments                                 |
//! |--------|------------------|-------------------------------------------|
//! | 1      | `create_account` | `u64 account, u64 balance`                |
//! | 2      | `transfer`       | `u64 from, u64 to, u64 amount`            |
//! | 3      | `set_register`   | `u32 len, key, u32 len, value`            |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, Digest, StakingKey, StakingKeyPair, StakingSignature};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    CreateAccount { account: u64, balance: u64 },
    Transfer { from: u64, to: u64, amount: u64 },
    SetRegister { key: Vec<u8>, value: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptOp {
    #[serde(flatten)]
    pub op: Op,
    pub cost: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("script truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("{0} trailing bytes after the last op")]
    TrailingBytes(usize),
    #[error("script declares no operations")]
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Script {
    pub ops: Vec<ScriptOp>,
}

impl Script {
    pub fn new(ops: Vec<ScriptOp>) -> Self {
        Self { ops }
    }

    pub fn total_cost(&self) -> u64 {
        self.ops.iter().map(|o| o.cost as u64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.ops.len() as u32).to_be_bytes());
        for o in &self.ops {
            match &o.op {
                Op::CreateAccount { account, balance } => {
                    out.push(1);
                    out.extend_from_slice(&o.cost.to_be_bytes());
                    out.extend_from_slice(&account.to_be_bytes());
                    out.extend_from_slice(&balance.to_be_bytes());
                }
                Op::Transfer { from, to, amount } => {
                    out.push(2);
                    out.extend_from_slice(&o.cost.to_be_bytes());
                    out.extend_from_slice(&from.to_be_bytes());
                    out.extend_from_slice(&to.to_be_bytes());
                    out.extend_from_slice(&amount.to_be_bytes());
                }
                Op::SetRegister { key, value } => {
                    out.push(3);
                    out.extend_from_slice(&o.cost.to_be_bytes());
                    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
                    out.extend_from_slice(key);
                    out.extend_from_slice(&(value.len() as u32).to_be_bytes());
                    out.extend_from_slice(value);
                }
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Script, ScriptError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let n = r.u32()?;
        if n == 0 {
            return Err(ScriptError::Empty);
        }
        let mut ops = Vec::new();
        for _ in 0..n {
            let opcode = r.u8()?;
            let cost = r.u32()?;
            let op = match opcode {
                1 => Op::CreateAccount { account: r.u64()?, balance: r.u64()? },
                2 => Op::Transfer { from: r.u64()?, to: r.u64()?, amount: r.u64()? },
                3 => {
                    let kl = r.u32()? as usize;
                    let key = r.take(kl)?.to_vec();
                    let vl = r.u32()? as usize;
                    let value = r.take(vl)?.to_vec();
                    Op::SetRegister { key, value }
                }
                other => return Err(ScriptError::UnknownOpcode(other)),
            };
            ops.push(ScriptOp { op, cost });
        }
        if r.pos != bytes.len() {
            return Err(ScriptError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Script { ops })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ScriptError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(ScriptError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ScriptError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ScriptError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ScriptError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedTransaction {
    #[serde(with = "hex_bytes")]
    pub script: Vec<u8>,
    pub reference_block_hash: Digest,
    pub payer: StakingKey,
    pub payer_signature: Option<StakingSignature>,
    pub script_signatures: Vec<(StakingKey, StakingSignature)>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl SignedTransaction {
    /// Bytes covered by the payer and script signatures.
    pub fn body_bytes(script: &[u8], reference_block_hash: &Digest, payer: StakingKey) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(b"tx-body").bytes(script).digest(reference_block_hash).u64(payer.0);
        enc.finish()
    }

    /// Builds a transaction paid by `payer` and authorized by `signers`.
    pub fn sign(script: &Script, reference_block_hash: Digest, payer: &StakingKeyPair, signers: &[&StakingKeyPair]) -> Self {
        let script = script.to_bytes();
        let body = Self::body_bytes(&script, &reference_block_hash, payer.public());
        Self {
            payer_signature: Some(payer.sign(&body)),
            script_signatures: signers.iter().map(|kp| (kp.public(), kp.sign(&body))).collect(),
            script,
            reference_block_hash,
            payer: payer.public(),
        }
    }

    pub fn hash(&self) -> Digest {
        hash(b"tx", &self.canonical_bytes())
    }

    pub fn signer_accounts(&self) -> impl Iterator<Item = u64> + '_ {
        self.script_signatures.iter().map(|(k, _)| k.0)
    }
}

impl Canonical for SignedTransaction {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.script).digest(&self.reference_block_hash).u64(self.payer.0);
        enc.opt_bytes(self.payer_signature.map(|s| s.to_bytes()).as_ref().map(|b| &b[..]));
        enc.len_prefix(self.script_signatures.len());
        for (k, s) in &self.script_signatures {
            enc.u64(k.0).raw(&s.to_bytes());
        }
    }
}

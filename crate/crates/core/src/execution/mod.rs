// SPDX-License-Identifier: Apache-2.0

//! Block execution with chunking, execution receipts, chunk re-execution and
//! fault attribution along the result chain.

mod merkle;
mod vm;

pub use merkle::{empty_leaf, leaf_hash, verify_value_proof, ExecutionState, ValueProof};
pub use vm::{account_key, balance, execute, register_key, TxOutcome, TxStatus, MALFORMED_COST};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, hash_parts, Digest, StakingKey, StakingKeyPair, StakingSignature};
use crate::transaction::{Script, SignedTransaction};

/// Default chunk budget in computation units.
pub const DEFAULT_CHUNK_BUDGET: u64 = 100;

/// `TraceUpdate`: `hash("spock", acc || zeta)`, starting from the zero digest.
pub fn trace_update(acc: &Digest, zeta: &Digest) -> Digest {
    hash_parts(b"spock", &[acc.as_bytes(), zeta.as_bytes()])
}

/// Declared cost of a transaction; does not depend on state.
pub fn declared_cost(tx: &SignedTransaction) -> u64 {
    Script::parse(&tx.script).map_or(MALFORMED_COST, |s| s.total_cost())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub start_state: Digest,
    pub starting_tx_cost: u64,
    pub starting_tx_index: u32,
    pub consumption: u64,
}

impl Canonical for Chunk {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.start_state).u64(self.starting_tx_cost).u32(self.starting_tx_index).u64(self.consumption);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub block_hash: Digest,
    pub previous_result_hash: Digest,
    pub chunks: Vec<Chunk>,
    pub final_state: Digest,
}

impl ExecutionResult {
    pub fn hash(&self) -> Digest {
        hash(b"execution-result", &self.canonical_bytes())
    }

    /// Transaction index range of chunk `i` within a block of `tx_count`.
    pub fn chunk_range(&self, i: usize, tx_count: usize) -> std::ops::Range<usize> {
        let start = self.chunks[i].starting_tx_index as usize;
        let end = self.chunks.get(i + 1).map_or(tx_count, |c| c.starting_tx_index as usize);
        start..end.max(start)
    }

    /// State commitment after chunk `i`.
    pub fn chunk_end_state(&self, i: usize) -> Digest {
        self.chunks.get(i + 1).map_or(self.final_state, |c| c.start_state)
    }
}

impl Canonical for ExecutionResult {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.block_hash).digest(&self.previous_result_hash);
        self.chunks.encode(enc);
        enc.digest(&self.final_state);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionReceipt {
    pub result: ExecutionResult,
    pub spocks: Vec<Digest>,
    pub executor: StakingKey,
    pub signature: StakingSignature,
}

impl ExecutionReceipt {
    pub fn signing_bytes(result: &ExecutionResult, spocks: &[Digest]) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(b"receipt").digest(&result.hash());
        spocks.encode(&mut enc);
        enc.finish()
    }

    pub fn sign(result: ExecutionResult, spocks: Vec<Digest>, executor: &StakingKeyPair) -> Self {
        let signature = executor.sign(&Self::signing_bytes(&result, &spocks));
        Self { result, spocks, executor: executor.public(), signature }
    }

    pub fn verify_signature(&self) -> bool {
        self.spocks.len() == self.result.chunks.len()
            && self.executor.verify(&Self::signing_bytes(&self.result, &self.spocks), &self.signature)
    }

    pub fn hash(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.raw(&Self::signing_bytes(&self.result, &self.spocks)).u64(self.executor.0).raw(&self.signature.to_bytes());
        hash(b"execution-receipt", &enc.finish())
    }
}

/// Canonical transaction order: collections in block order, each in its own
/// order. `None` marks a collection skipped under a missing-collection
/// attestation.
pub fn canonical(collections: &[Option<Vec<SignedTransaction>>]) -> Vec<&SignedTransaction> {
    collections.iter().flatten().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkBounds {
    pub start: usize,
    pub end: usize,
    pub consumption: u64,
}

/// Chunk boundaries computed from the cost sequence alone. A chunk
/// closes before the transaction that would push it past `budget`, unless the
/// chunk is still empty; an empty block yields one empty chunk.
pub fn chunk_boundaries(costs: &[u64], budget: u64) -> Vec<ChunkBounds> {
    let mut out = Vec::new();
    let (mut start, mut c) = (0usize, 0u64);
    for (i, &tau) in costs.iter().enumerate() {
        if c + tau > budget && i > start {
            out.push(ChunkBounds { start, end: i, consumption: c });
            start = i;
            c = 0;
        }
        c += tau;
    }
    out.push(ChunkBounds { start, end: costs.len(), consumption: c });
    out
}

/// Deliberate corruption of one chunk, used by Byzantine executors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    /// Clamped to the last chunk of the block.
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ExecutionEvent {
    OversizedChunk { chunk: usize, consumption: u64, budget: u64 },
    TxFailed { index: usize, status: TxStatus },
    FaultInjected { chunk: usize },
}

#[derive(Debug, Clone)]
pub struct BlockExecution {
    pub receipt: ExecutionReceipt,
    pub final_state: ExecutionState,
    /// Register snapshot at the start of every chunk.
    pub chunk_start_states: Vec<ExecutionState>,
    pub events: Vec<ExecutionEvent>,
}

/// `BlockExecution(b, h_er_prev, Λ)`.
pub fn block_execution(
    block_hash: Digest,
    previous_result_hash: Digest,
    state: ExecutionState,
    txs: &[&SignedTransaction],
    budget: u64,
    executor: &StakingKeyPair,
    fault: Option<FaultInjection>,
) -> BlockExecution {
    let fault_at = fault.map(|f| {
        let costs: Vec<u64> = txs.iter().map(|t| declared_cost(t)).collect();
        let bounds = chunk_boundaries(&costs, budget);
        let idx = f.chunk.min(bounds.len() - 1);
        (idx, bounds[idx].start)
    });
    let mut events = Vec::new();
    let mut zs = Vec::new();
    let mut chunks = Vec::new();
    let mut starts = Vec::new();
    let mut lambda = state;
    let mut lambda_start = lambda.clone();
    let mut start_index = 0usize;
    let mut c = 0u64;
    let mut tau0 = 0u64;
    let mut zeta_acc = Digest::ZERO;

    for (i, tx) in txs.iter().enumerate() {
        let lambda_prev = lambda.clone();
        let out = execute(&mut lambda, tx);
        if out.status != TxStatus::Ok {
            events.push(ExecutionEvent::TxFailed { index: i, status: out.status.clone() });
        }
        let tau = out.cost;
        if i == 0 {
            tau0 = tau;
        }
        if c + tau > budget && i > start_index {
            chunks.push(Chunk {
                start_state: lambda_start.commitment(),
                starting_tx_cost: tau0,
                starting_tx_index: start_index as u32,
                consumption: c,
            });
            zs.push(zeta_acc);
            starts.push(std::mem::replace(&mut lambda_start, lambda_prev));
            start_index = i;
            tau0 = tau;
            zeta_acc = Digest::ZERO;
            c = 0;
        }
        c += tau;
        zeta_acc = trace_update(&zeta_acc, &out.trace);
        if fault_at == Some((chunks.len(), i)) {
            lambda.set(register_key(b"fault"), block_hash.as_bytes().to_vec());
            events.push(ExecutionEvent::FaultInjected { chunk: chunks.len() });
        }
    }
    if txs.is_empty() && fault_at.is_some() {
        lambda.set(register_key(b"fault"), block_hash.as_bytes().to_vec());
        events.push(ExecutionEvent::FaultInjected { chunk: 0 });
    }
    chunks.push(Chunk {
        start_state: lambda_start.commitment(),
        starting_tx_cost: tau0,
        starting_tx_index: start_index as u32,
        consumption: c,
    });
    zs.push(zeta_acc);
    starts.push(lambda_start);

    for (i, ch) in chunks.iter().enumerate() {
        if ch.consumption > budget {
            events.push(ExecutionEvent::OversizedChunk { chunk: i, consumption: ch.consumption, budget });
        }
    }
    let result = ExecutionResult { block_hash, previous_result_hash, chunks, final_state: lambda.commitment() };
    BlockExecution {
        receipt: ExecutionReceipt::sign(result, zs, executor),
        final_state: lambda,
        chunk_start_states: starts,
        events,
    }
}

/// Executor-supplied inputs for re-executing one chunk: the start snapshot and
/// inclusion proofs for every register the chunk modifies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDataPack {
    pub chunk_index: usize,
    pub start_registers: BTreeMap<Vec<u8>, Vec<u8>>,
    pub proofs: Vec<(Vec<u8>, Vec<u8>, ValueProof)>,
}

impl ChunkDataPack {
    /// Builds the pack from the chunk's start snapshot and end snapshot.
    pub fn build(chunk_index: usize, start: &ExecutionState, end: &ExecutionState) -> Self {
        let proofs = start
            .registers()
            .iter()
            .filter(|(k, v)| end.get(k) != Some(v.as_slice()))
            .map(|(k, v)| (k.clone(), v.clone(), start.prove(k).expect("present key")))
            .collect();
        Self { chunk_index, start_registers: start.registers().clone(), proofs }
    }
}

/// Everything a checker recomputes for one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkRecomputation {
    pub consumption: u64,
    pub starting_tx_cost: u64,
    pub end_state: Digest,
    pub spock: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ChunkFault {
    #[error("chunk {chunk}: supplied state does not match the start commitment")]
    ProofFailure { chunk: usize },
    #[error("chunk {chunk}: chunk layout differs from the canonical chunking")]
    StructureMismatch { chunk: usize },
    #[error("chunk {chunk}: consumption differs")]
    ConsumptionMismatch { chunk: usize, recomputed: ChunkRecomputation },
    #[error("chunk {chunk}: end state differs")]
    EndStateMismatch { chunk: usize, recomputed: ChunkRecomputation },
    #[error("chunk {chunk}: execution trace differs")]
    TraceMismatch { chunk: usize, recomputed: ChunkRecomputation },
}

impl ChunkFault {
    pub fn chunk(&self) -> usize {
        match self {
            ChunkFault::ProofFailure { chunk }
            | ChunkFault::StructureMismatch { chunk }
            | ChunkFault::ConsumptionMismatch { chunk, .. }
            | ChunkFault::EndStateMismatch { chunk, .. }
            | ChunkFault::TraceMismatch { chunk, .. } => *chunk,
        }
    }
}

/// Re-executes chunk `i` of `receipt` from `pack` and checks every claim the
/// receipt makes about it. `txs` is the block's canonical transaction list.
pub fn recheck_chunk(
    receipt: &ExecutionReceipt,
    txs: &[&SignedTransaction],
    pack: &ChunkDataPack,
    budget: u64,
) -> Result<ChunkRecomputation, ChunkFault> {
    let result = &receipt.result;
    let i = pack.chunk_index;
    if i >= result.chunks.len() || receipt.spocks.len() != result.chunks.len() {
        return Err(ChunkFault::StructureMismatch { chunk: i });
    }
    let costs: Vec<u64> = txs.iter().map(|t| declared_cost(t)).collect();
    let bounds = chunk_boundaries(&costs, budget);
    if bounds.len() != result.chunks.len()
        || bounds.iter().zip(&result.chunks).any(|(b, c)| b.start != c.starting_tx_index as usize)
    {
        return Err(ChunkFault::StructureMismatch { chunk: i });
    }
    let chunk = &result.chunks[i];
    let mut state = ExecutionState::from_registers(pack.start_registers.clone());
    if state.commitment() != chunk.start_state
        || !pack.proofs.iter().all(|(k, v, p)| verify_value_proof(k, v, p, &chunk.start_state))
    {
        return Err(ChunkFault::ProofFailure { chunk: i });
    }
    let range = result.chunk_range(i, txs.len());
    let mut consumption = 0;
    let mut spock = Digest::ZERO;
    let mut first_cost = 0;
    for (n, tx) in txs[range].iter().enumerate() {
        let out = execute(&mut state, tx);
        if n == 0 {
            first_cost = out.cost;
        }
        consumption += out.cost;
        spock = trace_update(&spock, &out.trace);
    }
    let recomputed = ChunkRecomputation { consumption, starting_tx_cost: first_cost, end_state: state.commitment(), spock };
    if consumption != chunk.consumption || first_cost != chunk.starting_tx_cost {
        return Err(ChunkFault::ConsumptionMismatch { chunk: i, recomputed });
    }
    if recomputed.end_state != result.chunk_end_state(i) {
        return Err(ChunkFault::EndStateMismatch { chunk: i, recomputed });
    }
    if spock != receipt.spocks[i] {
        return Err(ChunkFault::TraceMismatch { chunk: i, recomputed });
    }
    Ok(recomputed)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("no receipt on the chain diverges; the challenge is unfounded")]
    NoDivergence,
}

/// Walks `previous_result_hash` links back from `head` and returns the
/// executor of the earliest receipt that `is_faulty` flags. Receipts that
/// only build on a faulty predecessor are not blamed.
pub fn trace_fault_origin<'a>(
    head: &'a ExecutionReceipt,
    lookup: impl Fn(&Digest) -> Option<&'a ExecutionReceipt>,
    is_faulty: impl Fn(&ExecutionReceipt) -> bool,
) -> Result<StakingKey, TraceError> {
    let mut chain = vec![head];
    let mut cur = head;
    while let Some(prev) = lookup(&cur.result.previous_result_hash) {
        if chain.len() > 1_000_000 || chain.iter().any(|r| std::ptr::eq(*r, prev)) {
            break;
        }
        chain.push(prev);
        cur = prev;
    }
    chain.iter().rev().find(|r| is_faulty(r)).map(|r| r.executor).ok_or(TraceError::NoDivergence)
}

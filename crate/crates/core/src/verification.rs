// SPDX-License-Identifier: Apache-2.0

//! Chunk assignment, chunk verification, result approvals, and the evidence
//! formats behind faulty-computation and missing-collection challenges.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;

use crate::codec::{Canonical, Encoder};
use crate::collection::{texts_match, GuaranteedCollection};
use crate::crypto::{derive_seed, hash, Digest, Seed, StakingKey, StakingKeyPair, StakingSignature};
use crate::execution::{canonical, recheck_chunk, ChunkDataPack, ChunkFault, ExecutionReceipt};
use crate::state::{meets_supermajority, ChallengeKind, Committee, SlashingChallenge, Verdict};
use crate::transaction::SignedTransaction;

/// Whether chunk `chunk` of a block with randomness `sigma` goes to
/// `verifier`: the first word of `derive_seed(["verify"], sigma || v || i)`
/// is below `p * 2^64`.
pub fn is_assigned(verifier: StakingKey, sigma: &Digest, chunk: u32, p: f64) -> bool {
    let mut material = sigma.as_bytes().to_vec();
    material.extend_from_slice(&verifier.to_bytes());
    material.extend_from_slice(&chunk.to_be_bytes());
    let word = derive_seed(&["verify"], &material).expect("non-empty").stream().next_word();
    let cutoff = (p.clamp(0.0, 1.0) * 18_446_744_073_709_551_616.0) as u128;
    (word as u128) < cutoff
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkAssignment {
    pub verifier: StakingKey,
    pub chunks: Vec<u32>,
}

/// Chunks `verifier` checks. For `p > 0` nobody is left with an empty set:
/// if no chunk passes [`is_assigned`], one is drawn uniformly from the same
/// seed material, so every verifier can approve.
pub fn assign_chunks(verifier: StakingKey, sigma: &Digest, chunk_count: usize, p: f64) -> ChunkAssignment {
    let mut chunks: Vec<u32> = (0..chunk_count as u32).filter(|&i| is_assigned(verifier, sigma, i, p)).collect();
    if chunks.is_empty() && chunk_count > 0 && p > 0.0 {
        let mut material = sigma.as_bytes().to_vec();
        material.extend_from_slice(&verifier.to_bytes());
        let mut stream = derive_seed(&["verify-fallback"], &material).expect("non-empty").stream();
        chunks.push(stream.next_below(chunk_count as u64) as u32);
    }
    ChunkAssignment { verifier, chunks }
}

/// Fraction of `trials` random blocks in which chunk 0 is checked by none of
/// `verifiers`.
pub fn estimate_miss_probability(p: f64, verifiers: usize, trials: u64, seed: &Seed) -> f64 {
    let keys: Vec<StakingKey> = (0..verifiers as u64).map(|i| StakingKey(i + 1)).collect();
    let mut stream = seed.stream();
    let mut misses = 0u64;
    for _ in 0..trials {
        let mut sigma = [0u8; 32];
        for w in sigma.chunks_mut(8) {
            w.copy_from_slice(&stream.next_word().to_be_bytes());
        }
        let sigma = Digest(sigma);
        if !keys.iter().any(|k| is_assigned(*k, &sigma, 0, p)) {
            misses += 1;
        }
    }
    misses as f64 / trials as f64
}

fn approval_bytes(result: &Digest, chunk: u32, spock: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"approval").digest(result).u32(chunk).digest(spock);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ResultApproval {
    pub result_hash: Digest,
    pub chunk_index: u32,
    pub verifier: StakingKey,
    pub spock: Digest,
    pub signature: StakingSignature,
}

impl ResultApproval {
    pub fn sign(result_hash: Digest, chunk_index: u32, spock: Digest, kp: &StakingKeyPair) -> Self {
        let signature = kp.sign(&approval_bytes(&result_hash, chunk_index, &spock));
        Self { result_hash, chunk_index, verifier: kp.public(), spock, signature }
    }

    pub fn verify(&self) -> bool {
        self.verifier.verify(&approval_bytes(&self.result_hash, self.chunk_index, &self.spock), &self.signature)
    }
}

impl Canonical for ResultApproval {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.result_hash)
            .u32(self.chunk_index)
            .u64(self.verifier.0)
            .digest(&self.spock)
            .raw(&self.signature.to_bytes());
    }
}

/// Verifiers whose approvals cover every chunk assigned to them, each with
/// a non-empty assignment and a matching SPoCK, hold more than 2/3 of the
/// verifier stake.
pub fn approvals_meet_quorum(
    receipt: &ExecutionReceipt,
    approvals: &[ResultApproval],
    verifiers: &Committee,
    sigma: &Digest,
    p: f64,
) -> bool {
    let result_hash = receipt.result.hash();
    let mut by_verifier: BTreeMap<StakingKey, BTreeSet<u32>> = BTreeMap::new();
    for a in approvals {
        let ok = a.result_hash == result_hash
            && verifiers.contains(a.verifier)
            && receipt.spocks.get(a.chunk_index as usize) == Some(&a.spock)
            && a.verify();
        if ok {
            by_verifier.entry(a.verifier).or_default().insert(a.chunk_index);
        }
    }
    let n = receipt.result.chunks.len();
    let covering: Vec<StakingKey> = by_verifier
        .into_iter()
        .filter(|(v, got)| {
            let want = assign_chunks(*v, sigma, n, p).chunks;
            !want.is_empty() && want.iter().all(|c| got.contains(c))
        })
        .map(|(v, _)| v)
        .collect();
    verifiers.effective_votes(covering.iter()).is_ok_and(meets_supermajority)
}

fn pack_digest(receipt_hash: &Digest, pack: &ChunkDataPack) -> Digest {
    let mut enc = Encoder::new();
    enc.digest(receipt_hash).u64(pack.chunk_index as u64);
    enc.len_prefix(pack.start_registers.len());
    for (k, v) in &pack.start_registers {
        enc.bytes(k).bytes(v);
    }
    enc.len_prefix(pack.proofs.len());
    for (k, v, p) in &pack.proofs {
        enc.bytes(k).bytes(v).u64(p.index);
        p.siblings.encode(&mut enc);
    }
    hash(b"chunk-data-pack", &enc.finish())
}

/// Chunk data pack as handed out by its executor, who signs it so that a
/// challenger cannot substitute its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedDataPack {
    pub pack: ChunkDataPack,
    pub signature: StakingSignature,
}

impl SignedDataPack {
    pub fn sign(receipt: &ExecutionReceipt, pack: ChunkDataPack, executor: &StakingKeyPair) -> Self {
        let signature = executor.sign(pack_digest(&receipt.hash(), &pack).as_bytes());
        Self { pack, signature }
    }

    pub fn verify(&self, receipt: &ExecutionReceipt) -> bool {
        receipt.executor.verify(pack_digest(&receipt.hash(), &self.pack).as_bytes(), &self.signature)
    }
}

/// Block inputs a chunk is checked against: the block's collections with
/// texts, `None` for collections skipped under an attestation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInputs {
    pub collections: Vec<Option<Vec<SignedTransaction>>>,
}

impl BlockInputs {
    /// Texts match the listed guarantees; skips only where attested.
    pub fn matches(&self, guaranteed: &[GuaranteedCollection], attested: &HashSet<Digest>) -> bool {
        self.collections.len() == guaranteed.len()
            && self.collections.iter().zip(guaranteed).all(|(c, g)| match c {
                Some(texts) => texts_match(&g.collection_hash, texts),
                None => attested.contains(&g.collection_hash),
            })
    }

    pub fn transactions(&self) -> Vec<&SignedTransaction> {
        canonical(&self.collections)
    }
}

/// A verifier's claim that a receipt's chunk is wrong, carrying everything
/// needed to re-run the chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultyComputationChallenge {
    pub receipt: ExecutionReceipt,
    pub chunk_index: u32,
    pub inputs: BlockInputs,
    pub pack: SignedDataPack,
    pub fault: ChunkFault,
    pub challenger: StakingKey,
    pub signature: StakingSignature,
}

impl FaultyComputationChallenge {
    fn digest_for_signing(receipt: &ExecutionReceipt, chunk_index: u32, pack: &SignedDataPack) -> Digest {
        let mut enc = Encoder::new();
        enc.digest(&receipt.hash()).u32(chunk_index).raw(&pack.signature.to_bytes());
        hash(b"fcc", &enc.finish())
    }

    pub fn id_digest(&self) -> Digest {
        Self::digest_for_signing(&self.receipt, self.chunk_index, &self.pack)
    }

    pub fn verify_signature(&self) -> bool {
        self.challenger.verify(self.id_digest().as_bytes(), &self.signature)
    }

    pub fn to_challenge(&self) -> SlashingChallenge {
        SlashingChallenge {
            kind: ChallengeKind::FaultyComputation,
            challenger: self.challenger,
            accused: vec![self.receipt.executor],
            evidence: vec![self.receipt.result.hash(), self.receipt.hash(), self.id_digest()],
            deadline: 0,
            full_proof: true,
        }
    }
}

/// Outcome of checking one assigned chunk.
#[derive(Debug, Clone)]
pub enum ChunkVerdict {
    Approve(ResultApproval),
    Challenge(Box<FaultyComputationChallenge>),
}

/// Checks `pack` against the receipt and re-executes the chunk.
pub fn verify_chunk(
    verifier: &StakingKeyPair,
    receipt: &ExecutionReceipt,
    inputs: &BlockInputs,
    pack: &SignedDataPack,
    budget: u64,
) -> ChunkVerdict {
    let txs = inputs.transactions();
    let chunk_index = pack.pack.chunk_index as u32;
    let fault = if !pack.verify(receipt) {
        Err(ChunkFault::ProofFailure { chunk: pack.pack.chunk_index })
    } else {
        recheck_chunk(receipt, &txs, &pack.pack, budget)
    };
    match fault {
        Ok(re) => ChunkVerdict::Approve(ResultApproval::sign(receipt.result.hash(), chunk_index, re.spock, verifier)),
        Err(fault) => {
            let signature = verifier.sign(FaultyComputationChallenge::digest_for_signing(receipt, chunk_index, pack).as_bytes());
            ChunkVerdict::Challenge(Box::new(FaultyComputationChallenge {
                receipt: receipt.clone(),
                chunk_index,
                inputs: inputs.clone(),
                pack: pack.clone(),
                fault,
                challenger: verifier.public(),
                signature,
            }))
        }
    }
}

/// Re-runs the disputed chunk. `None` means the challenge itself is not
/// admissible (unsigned, or its inputs do not match the block).
pub fn adjudicate_fcc(
    fcc: &FaultyComputationChallenge,
    block_collections: &[GuaranteedCollection],
    attested: &HashSet<Digest>,
    budget: u64,
) -> Option<Verdict> {
    if !fcc.verify_signature() || !fcc.receipt.verify_signature() {
        return None;
    }
    if !fcc.inputs.matches(block_collections, attested) || fcc.pack.pack.chunk_index != fcc.chunk_index as usize {
        return Some(Verdict::ChallengerAtFault);
    }
    // a pack the executor did not sign cannot be pinned on it
    if !fcc.pack.verify(&fcc.receipt) {
        return Some(Verdict::ChallengerAtFault);
    }
    let txs = fcc.inputs.transactions();
    match recheck_chunk(&fcc.receipt, &txs, &fcc.pack.pack, budget) {
        Ok(_) => Some(Verdict::ChallengerAtFault),
        Err(_) => Some(Verdict::AccusedAtFault),
    }
}

fn mcc_bytes(collection: &Digest, block: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"mcc").digest(collection).digest(block);
    enc.finish()
}

/// Raised after every guarantor of a collection failed to serve it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingCollectionChallenge {
    pub collection: GuaranteedCollection,
    pub block_hash: Digest,
    pub challenger: StakingKey,
    pub signature: StakingSignature,
}

impl MissingCollectionChallenge {
    pub fn sign(collection: GuaranteedCollection, block_hash: Digest, kp: &StakingKeyPair) -> Self {
        let signature = kp.sign(&mcc_bytes(&collection.collection_hash, &block_hash));
        Self { collection, block_hash, challenger: kp.public(), signature }
    }

    pub fn verify_signature(&self) -> bool {
        self.challenger.verify(&mcc_bytes(&self.collection.collection_hash, &self.block_hash), &self.signature)
    }

    /// Names the full guarantor set; silence until `deadline` (a block
    /// height) slashes them all.
    pub fn to_challenge(&self, deadline: u64) -> SlashingChallenge {
        SlashingChallenge {
            kind: ChallengeKind::MissingCollection,
            challenger: self.challenger,
            accused: self.collection.guarantors(),
            evidence: vec![self.collection.collection_hash, self.block_hash],
            deadline,
            full_proof: false,
        }
    }
}

/// A guarantor's answer to a missing-collection challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MccResponse {
    pub challenge_id: Digest,
    pub responder: StakingKey,
    pub texts: Vec<SignedTransaction>,
}

impl MccResponse {
    /// Valid iff sent by a named guarantor and the texts rebuild the hash.
    pub fn resolves(&self, challenge: &SlashingChallenge) -> bool {
        challenge.kind == ChallengeKind::MissingCollection
            && challenge.id() == self.challenge_id
            && challenge.accused.contains(&self.responder)
            && challenge.evidence.first().is_some_and(|h| texts_match(h, &self.texts))
    }
}

impl Canonical for MccResponse {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.challenge_id).u64(self.responder.0);
        self.texts.encode(enc);
    }
}

/// Permission to skip a collection whose guarantors were found silent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MissingCollectionAttestation {
    pub collection_hash: Digest,
    pub challenge_id: Digest,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::{GuaranteeAggregator, GuaranteeVote};
    use crate::execution::{block_execution, ExecutionState, FaultInjection};
    use crate::transaction::{Op, Script, ScriptOp};

    #[test]
    fn full_coverage_assigns_everything() {
        let sigma = hash(b"sigma", b"1");
        let a = assign_chunks(StakingKey(5), &sigma, 12, 1.0);
        assert_eq!(a.chunks, (0..12).collect::<Vec<_>>());
        assert!(assign_chunks(StakingKey(5), &sigma, 12, 0.0).chunks.is_empty());
        assert_eq!(assign_chunks(StakingKey(5), &sigma, 12, 0.4), assign_chunks(StakingKey(5), &sigma, 12, 0.4));
    }

    #[test]
    fn assignment_rate_tracks_p() {
        let mut hits = 0u32;
        let n = 10_000u32;
        for i in 0..n {
            let sigma = hash(b"sigma", &i.to_be_bytes());
            hits += is_assigned(StakingKey(1), &sigma, i % 7, 0.5) as u32;
        }
        let rate = hits as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * sd, "{rate}");
    }

    struct Fixture {
        executor: StakingKeyPair,
        verifier: StakingKeyPair,
        inputs: BlockInputs,
        guaranteed: Vec<GuaranteedCollection>,
    }

    fn fixture() -> Fixture {
        let user = StakingKeyPair::from_seed(b"user");
        let txs: Vec<SignedTransaction> = (0..6u8)
            .map(|i| {
                let s = Script::new(vec![ScriptOp { op: Op::SetRegister { key: vec![i], value: vec![i; 3] }, cost: 4 }]);
                SignedTransaction::sign(&s, Digest::ZERO, &user, &[&user])
            })
            .collect();
        let col = StakingKeyPair::from_seed(b"collector");
        let cluster = Committee::new(vec![(col.public(), 1)]);
        let h = crate::collection::collection_hash(&txs.iter().map(|t| t.hash()).collect::<Vec<_>>());
        let g = GuaranteeAggregator::default().add(&GuaranteeVote::sign(h, 0, &col), &cluster).unwrap();
        Fixture {
            executor: StakingKeyPair::from_seed(b"exec"),
            verifier: StakingKeyPair::from_seed(b"verifier"),
            inputs: BlockInputs { collections: vec![Some(txs)] },
            guaranteed: vec![g],
        }
    }

    fn packs(f: &Fixture, fault: Option<FaultInjection>) -> (ExecutionReceipt, Vec<SignedDataPack>) {
        let txs = f.inputs.transactions();
        let ex = block_execution(hash(b"b", b""), Digest::ZERO, ExecutionState::new(), &txs, 10, &f.executor, fault);
        let n = ex.receipt.result.chunks.len();
        let packs = (0..n)
            .map(|i| {
                let end = ex.chunk_start_states.get(i + 1).unwrap_or(&ex.final_state);
                SignedDataPack::sign(&ex.receipt, ChunkDataPack::build(i, &ex.chunk_start_states[i], end), &f.executor)
            })
            .collect();
        (ex.receipt, packs)
    }

    #[test]
    fn honest_receipt_is_approved_and_reaches_quorum() {
        let f = fixture();
        let (receipt, packs) = packs(&f, None);
        assert_eq!(receipt.result.chunks.len(), 3);
        let others: Vec<_> = (0..3).map(|i| StakingKeyPair::from_seed(format!("v{i}").as_bytes())).collect();
        let verifiers = Committee::new(
            std::iter::once(&f.verifier).chain(&others).map(|k| (k.public(), 1)).collect(),
        );
        let sigma = hash(b"sigma", b"");
        let mut approvals = Vec::new();
        for kp in std::iter::once(&f.verifier).chain(&others).take(3) {
            for p in &packs {
                match verify_chunk(kp, &receipt, &f.inputs, p, 10) {
                    ChunkVerdict::Approve(a) => approvals.push(a),
                    ChunkVerdict::Challenge(c) => panic!("{:?}", c.fault),
                }
            }
        }
        assert!(approvals_meet_quorum(&receipt, &approvals, &verifiers, &sigma, 1.0));
        // exactly half the stake
        let half: Vec<_> = approvals.iter().filter(|a| a.verifier != others[1].public()).cloned().collect();
        assert!(!approvals_meet_quorum(&receipt, &half, &verifiers, &sigma, 1.0));
        // one chunk short for one verifier
        let partial: Vec<_> = approvals[1..].to_vec();
        assert!(!approvals_meet_quorum(&receipt, &partial, &verifiers, &sigma, 1.0));
    }

    #[test]
    fn tampered_write_is_challenged_and_upheld() {
        let f = fixture();
        let (receipt, packs) = packs(&f, Some(FaultInjection { chunk: 1 }));
        let verdicts: Vec<_> = packs.iter().map(|p| verify_chunk(&f.verifier, &receipt, &f.inputs, p, 10)).collect();
        assert!(matches!(verdicts[0], ChunkVerdict::Approve(_)));
        let ChunkVerdict::Challenge(fcc) = &verdicts[1] else { panic!("chunk 1 should fail") };
        assert!(matches!(fcc.fault, ChunkFault::EndStateMismatch { chunk: 1, .. }));
        let none = HashSet::new();
        assert_eq!(adjudicate_fcc(fcc, &f.guaranteed, &none, 10), Some(Verdict::AccusedAtFault));
        assert_eq!(fcc.to_challenge().accused, vec![f.executor.public()]);
    }

    #[test]
    fn frivolous_and_forged_challenges() {
        let f = fixture();
        let (receipt, packs) = packs(&f, None);
        let signature = f.verifier.sign(FaultyComputationChallenge::digest_for_signing(&receipt, 0, &packs[0]).as_bytes());
        let mut fcc = FaultyComputationChallenge {
            receipt: receipt.clone(),
            chunk_index: 0,
            inputs: f.inputs.clone(),
            pack: packs[0].clone(),
            fault: ChunkFault::TraceMismatch {
                chunk: 0,
                recomputed: crate::execution::ChunkRecomputation {
                    consumption: 0,
                    starting_tx_cost: 0,
                    end_state: Digest::ZERO,
                    spock: Digest::ZERO,
                },
            },
            challenger: f.verifier.public(),
            signature,
        };
        let none = HashSet::new();
        assert_eq!(adjudicate_fcc(&fcc, &f.guaranteed, &none, 10), Some(Verdict::ChallengerAtFault));
        // a pack the executor never signed
        let mut forged = packs[0].clone();
        forged.pack.start_registers.insert(b"x".to_vec(), b"y".to_vec());
        fcc.pack = forged;
        fcc.signature = f.verifier.sign(fcc.id_digest().as_bytes());
        assert_eq!(adjudicate_fcc(&fcc, &f.guaranteed, &none, 10), Some(Verdict::ChallengerAtFault));
        fcc.signature = f.executor.sign(b"nope");
        assert_eq!(adjudicate_fcc(&fcc, &f.guaranteed, &none, 10), None);
    }

    #[test]
    fn wrong_pack_is_a_proof_failure() {
        let f = fixture();
        let (receipt, packs) = packs(&f, None);
        let mut swapped = packs[1].pack.clone();
        swapped.chunk_index = 0;
        let bad = SignedDataPack::sign(&receipt, swapped, &f.executor);
        let ChunkVerdict::Challenge(fcc) = verify_chunk(&f.verifier, &receipt, &f.inputs, &bad, 10) else {
            panic!()
        };
        assert!(matches!(fcc.fault, ChunkFault::ProofFailure { chunk: 0 }));
        assert_eq!(adjudicate_fcc(&fcc, &f.guaranteed, &HashSet::new(), 10), Some(Verdict::AccusedAtFault));
    }

    #[test]
    fn mcc_response_must_rebuild_hash() {
        let f = fixture();
        let g = f.guaranteed[0].clone();
        let mcc = MissingCollectionChallenge::sign(g.clone(), hash(b"b", b""), &f.verifier);
        assert!(mcc.verify_signature());
        let c = mcc.to_challenge(40);
        let texts = f.inputs.collections[0].clone().unwrap();
        let ok = MccResponse { challenge_id: c.id(), responder: g.guarantors()[0], texts: texts.clone() };
        assert!(ok.resolves(&c));
        let mut short = ok.clone();
        short.texts.pop();
        assert!(!short.resolves(&c));
        let stranger = MccResponse { responder: f.verifier.public(), ..ok };
        assert!(!stranger.resolves(&c));
    }

    #[test]
    fn miss_probability_matches_closed_form() {
        let seed = derive_seed(&["test"], b"miss").unwrap();
        let trials = 20_000;
        let est = estimate_miss_probability(0.5, 3, trials, &seed);
        let want = 0.125f64;
        let sd = (want * (1.0 - want) / trials as f64).sqrt();
        assert!((est - want).abs() < 3.0 * sd, "{est}");
    }
}

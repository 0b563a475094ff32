// SPDX-License-Identifier: Apache-2.0

//! Main-chain block formation: proto-blocks, the ten-condition proposal
//! check, state updates from challenges, seals, and randomness attachment.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::Serialize;

use crate::codec::{Canonical, Encoder};
use crate::collection::GuaranteedCollection;
use crate::crypto::{
    hash, threshold_recover, threshold_sign, threshold_verify, CryptoError, Digest, GroupParams, GroupSignature,
    SecretShare, SignatureShare, StakingKey,
};
use crate::execution::ExecutionReceipt;
use crate::hotstuff::{App, BlockTree, EquivocationEvidence, HsBlock, Validation};
use crate::state::{
    adjudicate_challenge, ChallengeKind, ChallengeStatus, Change, Committee, ProtocolState, Role, SlashPolicy,
    StateUpdate, UpdateCause, Verdict,
};
use crate::verification::{
    adjudicate_fcc, approvals_meet_quorum, FaultyComputationChallenge, MccResponse, MissingCollectionAttestation,
    MissingCollectionChallenge, ResultApproval,
};

/// Fixed randomness of the genesis block.
pub fn genesis_randomness() -> Digest {
    hash(b"genesis", b"")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSeal {
    pub block_hash: Digest,
    pub height: u64,
    pub result_hash: Digest,
    pub final_state: Digest,
    pub approvals: Vec<ResultApproval>,
}

impl Canonical for BlockSeal {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.block_hash).u64(self.height).digest(&self.result_hash).digest(&self.final_state);
        self.approvals.encode(enc);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChallengeEnvelope {
    FaultyComputation(Box<FaultyComputationChallenge>),
    MissingCollection(MissingCollectionChallenge),
    Equivocation { evidence: EquivocationEvidence, reporter: StakingKey },
}

impl ChallengeEnvelope {
    pub fn kind(&self) -> ChallengeKind {
        match self {
            ChallengeEnvelope::FaultyComputation(_) => ChallengeKind::FaultyComputation,
            ChallengeEnvelope::MissingCollection(_) => ChallengeKind::MissingCollection,
            ChallengeEnvelope::Equivocation { .. } => ChallengeKind::ProtocolViolation,
        }
    }

    /// Deduplication key: one challenge per receipt chunk, per missing
    /// collection, per equivocating (proposer, round).
    pub fn subject(&self) -> Digest {
        match self {
            ChallengeEnvelope::FaultyComputation(f) => {
                let mut enc = Encoder::new();
                enc.digest(&f.receipt.hash()).u32(f.chunk_index);
                hash(b"subject-fcc", &enc.finish())
            }
            ChallengeEnvelope::MissingCollection(m) => m.collection.collection_hash,
            ChallengeEnvelope::Equivocation { evidence, .. } => {
                let mut enc = Encoder::new();
                enc.u64(evidence.proposer.0).u64(evidence.round);
                hash(b"subject-equivocation", &enc.finish())
            }
        }
    }
}

impl Canonical for ChallengeEnvelope {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            ChallengeEnvelope::FaultyComputation(f) => {
                enc.u8(0).digest(&f.id_digest()).u64(f.challenger.0).raw(&f.signature.to_bytes());
                enc.len_prefix(f.inputs.collections.len());
                for c in &f.inputs.collections {
                    match c {
                        None => {
                            enc.u8(0);
                        }
                        Some(txs) => {
                            enc.u8(1);
                            txs.iter().map(|t| t.hash()).collect::<Vec<_>>().encode(enc);
                        }
                    }
                }
            }
            ChallengeEnvelope::MissingCollection(m) => {
                enc.u8(1);
                m.collection.encode(enc);
                enc.digest(&m.block_hash).u64(m.challenger.0).raw(&m.signature.to_bytes());
            }
            ChallengeEnvelope::Equivocation { evidence, reporter } => {
                enc.u8(2).u64(evidence.proposer.0).u64(evidence.round);
                enc.digest(&evidence.first.0).raw(&evidence.first.1.to_bytes());
                enc.digest(&evidence.second.0).raw(&evidence.second.1.to_bytes());
                enc.u64(reporter.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtoBlock {
    pub previous_block_hash: Digest,
    pub height: u64,
    pub guaranteed_collections: Vec<GuaranteedCollection>,
    pub seals: Vec<BlockSeal>,
    pub challenges: Vec<ChallengeEnvelope>,
    pub responses: Vec<MccResponse>,
    pub state_updates: Vec<StateUpdate>,
    pub state_commitment: Digest,
}

impl ProtoBlock {
    pub fn genesis(state: &ProtocolState) -> Self {
        Self {
            previous_block_hash: Digest::ZERO,
            height: 0,
            guaranteed_collections: vec![],
            seals: vec![],
            challenges: vec![],
            responses: vec![],
            state_updates: vec![],
            state_commitment: state.commitment(),
        }
    }

    pub fn hash(&self) -> Digest {
        hash(b"protoblock", &self.canonical_bytes())
    }
}

impl Canonical for ProtoBlock {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.previous_block_hash).u64(self.height);
        self.guaranteed_collections.encode(enc);
        self.seals.encode(enc);
        self.challenges.encode(enc);
        self.responses.encode(enc);
        self.state_updates.encode(enc);
        enc.digest(&self.state_commitment);
    }
}

/// A proto-block with its source of randomness attached.
#[derive(Debug, Clone)]
pub struct Block {
    pub proto: Arc<ProtoBlock>,
    pub source_of_randomness: GroupSignature,
}

impl Block {
    pub fn verify(&self, group: &GroupParams, group_key: &num_bigint::BigUint) -> bool {
        threshold_verify(group, &self.source_of_randomness, group_key, self.proto.hash().as_bytes())
    }

    /// Seed material for everything random about this block.
    pub fn randomness(&self) -> Digest {
        self.source_of_randomness.digest()
    }
}

/// The `n_s` lowest staking keys among consensus nodes.
pub fn drb_committee(consensus: &Committee, n_s: usize) -> Vec<StakingKey> {
    consensus.keys().take(n_s).collect()
}

/// A DRB member's share over a proto-block hash.
pub fn randomness_share(group: &GroupParams, share: &SecretShare, proto_hash: &Digest) -> SignatureShare {
    threshold_sign(group, share, proto_hash.as_bytes())
}

/// Recovers and checks the block signature from `t + 1` distinct shares.
pub fn attach_randomness(
    proto: Arc<ProtoBlock>,
    shares: &[SignatureShare],
    params: &crate::crypto::ThresholdParams,
    vv: &crate::crypto::VerificationVector,
) -> Result<Block, CryptoError> {
    let msg = proto.hash();
    let sigma = threshold_recover(params, vv, shares, msg.as_bytes())?;
    Ok(Block { proto, source_of_randomness: sigma })
}

/// Collections skipped under an upheld missing-collection challenge.
pub fn attested_missing(state: &ProtocolState) -> Vec<MissingCollectionAttestation> {
    state
        .challenges
        .iter()
        .filter(|(_, r)| {
            r.challenge.kind == ChallengeKind::MissingCollection
                && r.status == ChallengeStatus::Resolved(Verdict::AccusedAtFault)
        })
        .filter_map(|(id, r)| {
            r.challenge.evidence.first().map(|h| MissingCollectionAttestation { collection_hash: *h, challenge_id: *id })
        })
        .collect()
}

/// Results under a pending or upheld faulty-computation challenge.
pub fn blocked_results(state: &ProtocolState) -> HashSet<Digest> {
    state
        .challenges
        .values()
        .filter(|r| {
            r.challenge.kind == ChallengeKind::FaultyComputation
                && matches!(r.status, ChallengeStatus::Pending | ChallengeStatus::Resolved(Verdict::AccusedAtFault))
        })
        .filter_map(|r| r.challenge.evidence.first().copied())
        .collect()
}

#[derive(Debug, Clone)]
pub struct FormationParams {
    /// Consensus instance domain, for equivocation evidence.
    pub hs_domain: Vec<u8>,
    pub clusters: Vec<Committee>,
    pub chunk_budget: u64,
    pub coverage: f64,
    /// Blocks a missing-collection challenge waits for a response.
    pub mcc_deadline_blocks: u64,
    pub slash_policy: SlashPolicy,
    pub max_collections_per_block: usize,
    pub max_seals_per_block: usize,
    /// Result hash standing in for the executed genesis block.
    pub genesis_result: Digest,
}

/// Chain facts as of one block, on one branch.
#[derive(Debug, Clone)]
pub struct BranchInfo {
    pub state: ProtocolState,
    pub height: u64,
    pub proto_hash: Digest,
    pub last_sealed_height: u64,
    pub last_sealed_result: Digest,
}

/// Why a proposal is not voted for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub condition: u8,
    pub detail: String,
}

impl Rejection {
    fn new(condition: u8, detail: impl Into<String>) -> Self {
        Self { condition, detail: detail.into() }
    }

    pub fn reason(&self) -> String {
        format!("condition-{}: {}", self.condition, self.detail)
    }
}

/// Replays challenges and responses of one block on the parent state.
/// Returns `None` if any challenge or response is inadmissible.
pub fn derive_updates(
    parent: &ProtocolState,
    height: u64,
    challenges: &[ChallengeEnvelope],
    responses: &[MccResponse],
    params: &FormationParams,
    lookup_block: &dyn Fn(&Digest) -> Option<Vec<GuaranteedCollection>>,
) -> Result<(Vec<StateUpdate>, ProtocolState), String> {
    let mut state = parent.clone();
    let mut updates = Vec::new();
    let mut push = |state: &mut ProtocolState, u: StateUpdate| -> Result<(), String> {
        if u.changes.is_empty() {
            return Ok(());
        }
        state.apply_update(&u).map_err(|e| e.to_string())?;
        updates.push(u);
        Ok(())
    };
    let mut subjects = HashSet::new();
    let recorded_collections: HashSet<Digest> = parent
        .challenges
        .values()
        .filter(|r| r.challenge.kind == ChallengeKind::MissingCollection)
        .filter_map(|r| r.challenge.evidence.first().copied())
        .collect();
    for env in challenges {
        if !subjects.insert(env.subject()) {
            return Err("duplicate challenge in block".into());
        }
        let (challenge, verdict) = match env {
            ChallengeEnvelope::FaultyComputation(f) => {
                let block_hash = f.receipt.result.block_hash;
                let cols = lookup_block(&block_hash).ok_or("challenged block unknown")?;
                if state.node(f.challenger).map(|n| n.role) != Some(Role::Verification)
                    || state.node(f.receipt.executor).map(|n| n.role) != Some(Role::Execution)
                {
                    return Err("challenge parties have the wrong roles".into());
                }
                let attested: HashSet<Digest> = attested_missing(&state).iter().map(|a| a.collection_hash).collect();
                let v = adjudicate_fcc(f, &cols, &attested, params.chunk_budget).ok_or("unsigned challenge")?;
                (f.to_challenge(), Some(v))
            }
            ChallengeEnvelope::MissingCollection(m) => {
                if !m.verify_signature() {
                    return Err("unsigned missing-collection challenge".into());
                }
                if recorded_collections.contains(&m.collection.collection_hash) {
                    return Err("collection already challenged".into());
                }
                let role = state.node(m.challenger).map(|n| n.role);
                if !matches!(role, Some(Role::Execution | Role::Verification)) {
                    return Err("challenger may not raise missing-collection challenges".into());
                }
                let cols = lookup_block(&m.block_hash).ok_or("challenged block unknown")?;
                if !cols.contains(&m.collection) {
                    return Err("collection is not in the named block".into());
                }
                (m.to_challenge(height + params.mcc_deadline_blocks), None)
            }
            ChallengeEnvelope::Equivocation { evidence, reporter } => {
                if !evidence.verify(&params.hs_domain)
                    || state.node(evidence.proposer).map(|n| n.role) != Some(Role::Consensus)
                {
                    return Err("equivocation evidence does not verify".into());
                }
                let c = crate::state::SlashingChallenge {
                    kind: ChallengeKind::ProtocolViolation,
                    challenger: *reporter,
                    accused: vec![evidence.proposer],
                    evidence: vec![env.subject(), evidence.first.0, evidence.second.0],
                    deadline: 0,
                    full_proof: true,
                };
                (c, Some(Verdict::AccusedAtFault))
            }
        };
        let id = challenge.id();
        if state.challenges.contains_key(&id) {
            return Err("challenge already recorded".into());
        }
        push(&mut state, StateUpdate::new(UpdateCause::Slash, vec![Change::RecordChallenge(challenge.clone())]))?;
        if challenge.full_proof {
            let (_, u) = adjudicate_challenge(&state, &id, verdict, false, &params.slash_policy).map_err(|e| e.to_string())?;
            push(&mut state, u)?;
        }
    }
    for r in responses {
        let rec = state.challenges.get(&r.challenge_id).ok_or("response to unknown challenge")?;
        if rec.status != ChallengeStatus::Pending || !r.resolves(&rec.challenge) {
            return Err("response does not resolve its challenge".into());
        }
        let (_, u) = adjudicate_challenge(&state, &r.challenge_id, Some(Verdict::NoFault), false, &params.slash_policy)
            .map_err(|e| e.to_string())?;
        push(&mut state, u)?;
    }
    let expired: Vec<Digest> = state
        .pending_challenges()
        .filter(|r| !r.challenge.full_proof && r.challenge.deadline <= height)
        .map(|r| r.challenge.id())
        .collect();
    for id in expired {
        let (_, u) = adjudicate_challenge(&state, &id, None, true, &params.slash_policy).map_err(|e| e.to_string())?;
        push(&mut state, u)?;
    }
    Ok((updates, state))
}

/// Consensus-node application: builds proto-blocks and evaluates them.
pub struct ChainApp {
    pub params: FormationParams,
    pub me: StakingKey,
    finalized: BranchInfo,
    /// Proto-block hash by height, finalized chain only.
    finalized_hashes: Vec<Digest>,
    finalized_collections: HashMap<Digest, Vec<GuaranteedCollection>>,
    included: HashSet<Digest>,
    branch: HashMap<Digest, BranchInfo>,
    pub guarantees: IndexMap<Digest, GuaranteedCollection>,
    pub receipts: IndexMap<Digest, Vec<ExecutionReceipt>>,
    pub approvals: IndexMap<Digest, Vec<ResultApproval>>,
    pub challenges: IndexMap<Digest, ChallengeEnvelope>,
    pub responses: Vec<MccResponse>,
    /// Randomness digest by proto-block hash.
    pub randomness: HashMap<Digest, Digest>,
}

impl ChainApp {
    pub fn new(params: FormationParams, me: StakingKey, genesis_state: ProtocolState) -> Self {
        let genesis = ProtoBlock::genesis(&genesis_state);
        let gh = genesis.hash();
        let finalized = BranchInfo {
            state: genesis_state,
            height: 0,
            proto_hash: gh,
            last_sealed_height: 0,
            last_sealed_result: params.genesis_result,
        };
        let mut randomness = HashMap::new();
        randomness.insert(gh, genesis_randomness());
        Self {
            params,
            me,
            finalized,
            finalized_hashes: vec![gh],
            finalized_collections: [(gh, vec![])].into(),
            included: HashSet::new(),
            branch: HashMap::new(),
            guarantees: IndexMap::new(),
            receipts: IndexMap::new(),
            approvals: IndexMap::new(),
            challenges: IndexMap::new(),
            responses: Vec::new(),
            randomness,
        }
    }

    pub fn genesis_proto(&self) -> ProtoBlock {
        ProtoBlock::genesis(&self.finalized.state)
    }

    pub fn finalized(&self) -> &BranchInfo {
        &self.finalized
    }

    pub fn finalized_hash(&self, height: u64) -> Option<Digest> {
        self.finalized_hashes.get(height as usize).copied()
    }

    pub fn add_receipt(&mut self, r: ExecutionReceipt) {
        let list = self.receipts.entry(r.result.hash()).or_default();
        if !list.iter().any(|x| x.executor == r.executor) {
            list.push(r);
        }
    }

    pub fn add_approval(&mut self, a: ResultApproval) {
        let list = self.approvals.entry(a.result_hash).or_default();
        if !list.iter().any(|x| x.verifier == a.verifier && x.chunk_index == a.chunk_index) {
            list.push(a);
        }
    }

    /// Keeps a guarantee for inclusion unless the finalized chain has it.
    pub fn add_guarantee(&mut self, g: GuaranteedCollection) {
        if !self.included.contains(&g.collection_hash) {
            self.guarantees.entry(g.collection_hash).or_insert(g);
        }
    }

    pub fn add_response(&mut self, r: MccResponse) {
        if !self.responses.contains(&r) {
            self.responses.push(r);
        }
    }

    pub fn add_challenge(&mut self, c: ChallengeEnvelope) {
        self.challenges.entry(c.subject()).or_insert(c);
    }

    /// Info after block `id`, replaying certified ancestors as needed.
    fn info(&mut self, id: &Digest, tree: &BlockTree<ProtoBlock>) -> Option<BranchInfo> {
        if *id == tree.finalized_id() || tree.get(id).map(|b| b.payload.hash()) == Some(self.finalized.proto_hash) {
            return Some(self.finalized.clone());
        }
        if let Some(i) = self.branch.get(id) {
            return Some(i.clone());
        }
        let chain = tree.pending_chain(id)?;
        let mut cur = self.finalized.clone();
        for b in chain.into_iter().filter(|b| b.height > self.finalized.height) {
            if let Some(i) = self.branch.get(&b.id()) {
                cur = i.clone();
                continue;
            }
            cur = self.advance(&cur, &b.payload)?;
            self.branch.insert(b.id(), cur.clone());
        }
        Some(cur)
    }

    fn advance(&self, parent: &BranchInfo, pb: &ProtoBlock) -> Option<BranchInfo> {
        let mut state = parent.state.clone();
        for u in &pb.state_updates {
            state.apply_update(u).ok()?;
        }
        let (h, r) = pb.seals.last().map_or((parent.last_sealed_height, parent.last_sealed_result), |s| (s.height, s.result_hash));
        Some(BranchInfo { state, height: pb.height, proto_hash: pb.hash(), last_sealed_height: h, last_sealed_result: r })
    }

    /// Collections listed by ancestors of `id` above the finalized tip, and
    /// proto-blocks by hash on that stretch.
    fn pending_view(
        &self,
        id: &Digest,
        tree: &BlockTree<ProtoBlock>,
    ) -> Option<(HashSet<Digest>, HashMap<Digest, Vec<GuaranteedCollection>>)> {
        let chain = tree.pending_chain(id)?;
        let mut cols = HashSet::new();
        let mut blocks = HashMap::new();
        for b in chain {
            cols.extend(b.payload.guaranteed_collections.iter().map(|g| g.collection_hash));
            blocks.insert(b.payload.hash(), b.payload.guaranteed_collections.clone());
        }
        Some((cols, blocks))
    }

    fn lookup<'a>(
        &'a self,
        pending: &'a HashMap<Digest, Vec<GuaranteedCollection>>,
    ) -> impl Fn(&Digest) -> Option<Vec<GuaranteedCollection>> + 'a {
        move |h| pending.get(h).or_else(|| self.finalized_collections.get(h)).cloned()
    }

    /// Next seals on top of `parent`, in ascending height.
    fn ready_seals(&self, parent: &BranchInfo) -> Vec<BlockSeal> {
        let mut out = Vec::new();
        let mut prev = parent.last_sealed_result;
        let mut h = parent.last_sealed_height + 1;
        let blocked = blocked_results(&parent.state);
        let verifiers = parent.state.committee(Role::Verification);
        while out.len() < self.params.max_seals_per_block {
            let (Some(block_hash), Some(sigma)) = (
                self.finalized_hash(h),
                self.finalized_hash(h).and_then(|bh| self.randomness.get(&bh).copied()),
            ) else {
                break;
            };
            let found = self.receipts.values().flatten().find(|r| {
                let rh = r.result.hash();
                r.result.block_hash == block_hash
                    && r.result.previous_result_hash == prev
                    && !blocked.contains(&rh)
                    && approvals_meet_quorum(r, self.approvals.get(&rh).map_or(&[][..], |v| v), &verifiers, &sigma, self.params.coverage)
            });
            let Some(r) = found else { break };
            let rh = r.result.hash();
            let approvals = self.approvals.get(&rh).cloned().unwrap_or_default();
            out.push(BlockSeal { block_hash, height: h, result_hash: rh, final_state: r.result.final_state, approvals });
            prev = rh;
            h += 1;
        }
        out
    }

    fn check_seals(&self, parent: &BranchInfo, seals: &[BlockSeal]) -> Result<(), Rejection> {
        let mut prev = parent.last_sealed_result;
        let mut h = parent.last_sealed_height + 1;
        let blocked = blocked_results(&parent.state);
        let verifiers = parent.state.committee(Role::Verification);
        for s in seals {
            if s.height != h || self.finalized_hash(h) != Some(s.block_hash) {
                return Err(Rejection::new(8, "seals are not the next contiguous finalized heights"));
            }
            let Some(receipt) = self.receipts.get(&s.result_hash).and_then(|v| v.first()) else {
                return Err(Rejection::new(7, "sealed result not received"));
            };
            let Some(sigma) = self.randomness.get(&s.block_hash) else {
                return Err(Rejection::new(7, "randomness of sealed block not received"));
            };
            let ok = receipt.result.block_hash == s.block_hash
                && receipt.result.final_state == s.final_state
                && receipt.result.previous_result_hash == prev
                && !blocked.contains(&s.result_hash)
                && approvals_meet_quorum(receipt, &s.approvals, &verifiers, sigma, self.params.coverage);
            if !ok {
                return Err(Rejection::new(8, format!("seal for height {h} is invalid")));
            }
            prev = s.result_hash;
            h += 1;
        }
        Ok(())
    }

    /// Proposal conditions (2) and (4) to (10). Conditions (1) and (3) are
    /// enforced by the consensus engine before this is called.
    pub fn evaluate(&mut self, block: &HsBlock<ProtoBlock>, tree: &BlockTree<ProtoBlock>) -> Result<(), Rejection> {
        let pb = &block.payload;
        let Some(parent_block) = tree.get(&block.parent).cloned() else {
            return Err(Rejection::new(2, "parent unknown"));
        };
        let parent = self.info(&block.parent, tree).ok_or_else(|| Rejection::new(2, "does not extend the finalized chain"))?;
        if pb.previous_block_hash != parent_block.payload.hash() || pb.height != parent.height + 1 || block.height != pb.height {
            return Err(Rejection::new(2, "height or parent hash mismatch"));
        }
        let (pending_cols, pending_blocks) =
            self.pending_view(&block.parent, tree).ok_or_else(|| Rejection::new(2, "gap in ancestry"))?;
        let mut seen = HashSet::new();
        for g in &pb.guaranteed_collections {
            let h = g.collection_hash;
            if !seen.insert(h) || pending_cols.contains(&h) || self.included.contains(&h) {
                return Err(Rejection::new(4, "collection already included"));
            }
        }
        for g in &pb.guaranteed_collections {
            if !self.guarantees.contains_key(&g.collection_hash) {
                return Err(Rejection::new(5, "guaranteed collection not received"));
            }
        }
        for g in &pb.guaranteed_collections {
            let ok = self.params.clusters.get(g.cluster_index as usize).is_some_and(|c| g.verify(c));
            if !ok {
                return Err(Rejection::new(6, "collection guarantee lacks a cluster supermajority"));
            }
        }
        self.check_seals(&parent, &pb.seals)?;
        let lookup = self.lookup(&pending_blocks);
        let (updates, state) = derive_updates(&parent.state, pb.height, &pb.challenges, &pb.responses, &self.params, &lookup)
            .map_err(|e| Rejection::new(9, e))?;
        if updates != pb.state_updates {
            return Err(Rejection::new(9, "state updates do not follow from the challenges"));
        }
        if state.commitment() != pb.state_commitment {
            return Err(Rejection::new(10, "state commitment does not match the replayed updates"));
        }
        Ok(())
    }

    pub fn build(&mut self, parent_block: &HsBlock<ProtoBlock>, tree: &BlockTree<ProtoBlock>) -> ProtoBlock {
        let parent = self.info(&parent_block.id(), tree).expect("leader extends its own high QC");
        let (pending_cols, pending_blocks) = self.pending_view(&parent_block.id(), tree).unwrap_or_default();
        let guaranteed_collections: Vec<GuaranteedCollection> = self
            .guarantees
            .values()
            .filter(|g| !pending_cols.contains(&g.collection_hash) && !self.included.contains(&g.collection_hash))
            .filter(|g| self.params.clusters.get(g.cluster_index as usize).is_some_and(|c| g.verify(c)))
            .take(self.params.max_collections_per_block)
            .cloned()
            .collect();
        let seals = self.ready_seals(&parent);
        let height = parent.height + 1;
        let lookup = self.lookup(&pending_blocks);
        // admit challenges one by one so a bad one cannot spoil the block
        let mut challenges = Vec::new();
        for env in self.challenges.values() {
            let mut trial = challenges.clone();
            trial.push(env.clone());
            if derive_updates(&parent.state, height, &trial, &[], &self.params, &lookup).is_ok() {
                challenges = trial;
            }
        }
        let mut responses: Vec<MccResponse> = Vec::new();
        let mut answered = BTreeSet::new();
        for r in &self.responses {
            if answered.contains(&r.challenge_id) {
                continue;
            }
            let mut trial = responses.clone();
            trial.push(r.clone());
            if derive_updates(&parent.state, height, &challenges, &trial, &self.params, &lookup).is_ok() {
                answered.insert(r.challenge_id);
                responses = trial;
            }
        }
        let (state_updates, state) = derive_updates(&parent.state, height, &challenges, &responses, &self.params, &lookup)
            .expect("admitted individually");
        ProtoBlock {
            previous_block_hash: parent_block.payload.hash(),
            height,
            guaranteed_collections,
            seals,
            challenges,
            responses,
            state_updates,
            state_commitment: state.commitment(),
        }
    }

    /// Feeds a finalized block in chain order.
    pub fn on_finalized(&mut self, block: &HsBlock<ProtoBlock>) {
        let pb = &block.payload;
        let next = self
            .branch
            .remove(&block.id())
            .or_else(|| self.advance(&self.finalized, pb))
            .expect("finalized blocks were certified");
        self.finalized = next;
        let h = pb.hash();
        self.finalized_hashes.push(h);
        self.finalized_collections.insert(h, pb.guaranteed_collections.clone());
        for g in &pb.guaranteed_collections {
            self.included.insert(g.collection_hash);
            self.guarantees.shift_remove(&g.collection_hash);
        }
        for s in &pb.seals {
            self.approvals.shift_remove(&s.result_hash);
        }
        for c in &pb.challenges {
            self.challenges.shift_remove(&c.subject());
        }
        let state = &self.finalized.state;
        self.responses.retain(|r| state.challenges.get(&r.challenge_id).is_some_and(|c| c.status == ChallengeStatus::Pending));
        let fh = self.finalized.height;
        self.branch.retain(|_, b| b.height > fh);
    }
}

impl App<ProtoBlock> for ChainApp {
    fn propose(&mut self, parent: &HsBlock<ProtoBlock>, tree: &BlockTree<ProtoBlock>) -> ProtoBlock {
        self.build(parent, tree)
    }

    fn validate(&mut self, block: &HsBlock<ProtoBlock>, tree: &BlockTree<ProtoBlock>) -> Validation {
        match self.evaluate(block, tree) {
            Ok(()) => {
                if let Some(parent) = self.info(&block.parent, tree) {
                    if let Some(next) = self.advance(&parent, &block.payload) {
                        self.branch.insert(block.id(), next);
                    }
                }
                Validation::Accept
            }
            // missing data may still arrive
            Err(r) if matches!(r.condition, 5 | 7) => Validation::Defer,
            Err(r) => Validation::Reject(r.reason()),
        }
    }

    fn on_commit(&mut self, block: &HsBlock<ProtoBlock>) {
        self.on_finalized(block);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::{collection_hash, GuaranteeAggregator, GuaranteeVote};
    use crate::crypto::{dkg_setup, Seed, StakingKeyPair, ThresholdParams};
    use crate::execution::{Chunk, ExecutionResult};
    use crate::hotstuff::QuorumCertificate;
    use crate::state::{Epoch, NodeIdentity};

    const DOMAIN: &[u8] = b"test-consensus";

    struct Fixture {
        collectors: Vec<StakingKeyPair>,
        verifiers: Vec<StakingKeyPair>,
        executor: StakingKeyPair,
        app: ChainApp,
        tree: BlockTree<ProtoBlock>,
        genesis: Arc<HsBlock<ProtoBlock>>,
    }

    fn kp(tag: &str, i: usize) -> StakingKeyPair {
        StakingKeyPair::from_seed(format!("{tag}-{i}").as_bytes())
    }

    fn fixture() -> Fixture {
        let consensus: Vec<_> = (0..4).map(|i| kp("con", i)).collect();
        let collectors: Vec<_> = (0..5).map(|i| kp("col", i)).collect();
        let verifiers: Vec<_> = (0..3).map(|i| kp("ver", i)).collect();
        let executor = kp("exe", 0);
        let mut nodes = Vec::new();
        for (i, k) in consensus.iter().enumerate() {
            nodes.push(NodeIdentity::genesis(k.public(), Role::Consensus, 100, i as u32));
        }
        // one collector holds 40% so that the other four hold 60%
        for (i, k) in collectors.iter().enumerate() {
            nodes.push(NodeIdentity::genesis(k.public(), Role::Collector, if i == 0 { 400 } else { 150 }, 10 + i as u32));
        }
        for (i, k) in verifiers.iter().enumerate() {
            nodes.push(NodeIdentity::genesis(k.public(), Role::Verification, 100, 20 + i as u32));
        }
        nodes.push(NodeIdentity::genesis(executor.public(), Role::Execution, 1000, 30));
        let state = ProtocolState::genesis(Epoch::new(0, 0, 1000, 500).unwrap(), nodes).unwrap();
        let params = FormationParams {
            hs_domain: DOMAIN.to_vec(),
            clusters: vec![state.committee(Role::Collector)],
            chunk_budget: 1000,
            coverage: 1.0,
            mcc_deadline_blocks: 5,
            slash_policy: SlashPolicy::default(),
            max_collections_per_block: 16,
            max_seals_per_block: 4,
            genesis_result: hash(b"genesis-result", b""),
        };
        let app = ChainApp::new(params, consensus[0].public(), state);
        let genesis = Arc::new(HsBlock::genesis(DOMAIN, app.genesis_proto()));
        let tree = BlockTree::new(genesis.clone());
        Fixture { collectors, verifiers, executor, app, tree, genesis }
    }

    fn guarantee(f: &Fixture, tag: &str, signers: &[usize]) -> GuaranteedCollection {
        let h = collection_hash(&[hash(b"tx", tag.as_bytes())]);
        let cluster = &f.app.params.clusters[0];
        let mut agg = GuaranteeAggregator::default();
        let mut out = None;
        for &i in signers {
            out = agg.add(&GuaranteeVote::sign(h, 0, &f.collectors[i]), cluster).or(out);
        }
        out.unwrap_or_else(|| GuaranteedCollection {
            collection_hash: h,
            cluster_index: 0,
            signatures: signers
                .iter()
                .map(|&i| {
                    let v = GuaranteeVote::sign(h, 0, &f.collectors[i]);
                    (v.signer, v.signature)
                })
                .collect(),
        })
    }

    fn wrap(parent: &HsBlock<ProtoBlock>, pb: ProtoBlock) -> Arc<HsBlock<ProtoBlock>> {
        let round = parent.round + 1;
        let qc = QuorumCertificate::genesis(parent.id());
        Arc::new(HsBlock::new(DOMAIN, round, pb.height, parent.id(), qc, pb, StakingKey(1), 0))
    }

    fn reason(f: &mut Fixture, b: &HsBlock<ProtoBlock>) -> Option<u8> {
        f.app.evaluate(b, &f.tree).err().map(|r| r.condition)
    }

    #[test]
    fn honest_proposal_passes_every_condition() {
        let mut f = fixture();
        let g = guarantee(&f, "a", &[0, 1, 2]);
        f.app.guarantees.insert(g.collection_hash, g.clone());
        let pb = f.app.build(&f.genesis.clone(), &f.tree);
        assert_eq!(pb.guaranteed_collections, vec![g]);
        let b = wrap(&f.genesis, pb);
        assert_eq!(f.app.validate(&b, &f.tree), Validation::Accept);
    }

    #[test]
    fn tampered_commitment_fails_condition_10() {
        let mut f = fixture();
        let mut pb = f.app.build(&f.genesis.clone(), &f.tree);
        pb.state_commitment = hash(b"x", b"tampered");
        let b = wrap(&f.genesis, pb);
        assert_eq!(reason(&mut f, &b), Some(10));
        match f.app.validate(&b, &f.tree) {
            Validation::Reject(r) => assert!(r.starts_with("condition-10")),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn sixty_percent_guarantee_fails_condition_6() {
        let mut f = fixture();
        let weak = guarantee(&f, "weak", &[1, 2, 3, 4]);
        f.app.guarantees.insert(weak.collection_hash, weak.clone());
        let mut pb = f.app.build(&f.genesis.clone(), &f.tree);
        // the proposer filters it; force it in
        assert!(pb.guaranteed_collections.is_empty());
        pb.guaranteed_collections.push(weak);
        let b = wrap(&f.genesis, pb);
        assert_eq!(reason(&mut f, &b), Some(6));
    }

    #[test]
    fn unseen_guarantee_defers_and_repeat_is_rejected() {
        let mut f = fixture();
        let g = guarantee(&f, "a", &[0, 1, 2]);
        let mut pb = f.app.build(&f.genesis.clone(), &f.tree);
        pb.guaranteed_collections.push(g.clone());
        let b1 = wrap(&f.genesis, pb);
        assert_eq!(f.app.validate(&b1, &f.tree), Validation::Defer);
        f.app.guarantees.insert(g.collection_hash, g.clone());
        assert_eq!(f.app.validate(&b1, &f.tree), Validation::Accept);
        f.tree.insert(b1.clone());
        let mut pb2 = f.app.build(&b1, &f.tree);
        assert!(pb2.guaranteed_collections.is_empty());
        pb2.guaranteed_collections.push(g);
        let b2 = wrap(&b1, pb2);
        assert_eq!(reason(&mut f, &b2), Some(4));
    }

    #[test]
    fn wrong_parent_hash_fails_condition_2() {
        let mut f = fixture();
        let mut pb = f.app.build(&f.genesis.clone(), &f.tree);
        pb.height = 2;
        let b = wrap(&f.genesis, pb);
        assert_eq!(reason(&mut f, &b), Some(2));
    }

    fn receipt_for(f: &Fixture, block_hash: Digest) -> ExecutionReceipt {
        let result = ExecutionResult {
            block_hash,
            previous_result_hash: f.app.params.genesis_result,
            chunks: vec![Chunk { start_state: Digest::ZERO, starting_tx_cost: 0, starting_tx_index: 0, consumption: 0 }],
            final_state: hash(b"state", b"1"),
        };
        ExecutionReceipt::sign(result, vec![hash(b"spock", b"0")], &f.executor)
    }

    #[test]
    fn seal_needs_more_than_two_thirds_of_verifier_stake() {
        let mut f = fixture();
        let pb = f.app.build(&f.genesis.clone(), &f.tree);
        let b1 = wrap(&f.genesis, pb);
        f.tree.insert(b1.clone());
        f.app.on_finalized(&b1);
        let h1 = b1.payload.hash();
        f.app.randomness.insert(h1, hash(b"sigma", b"1"));
        let r = receipt_for(&f, h1);
        let rh = r.result.hash();
        f.app.add_receipt(r.clone());
        for v in &f.verifiers[..2] {
            f.app.add_approval(ResultApproval::sign(rh, 0, r.spocks[0], v));
        }
        let pb2 = f.app.build(&b1, &f.tree);
        assert!(pb2.seals.is_empty(), "exactly 2/3 stays pending");
        f.app.add_approval(ResultApproval::sign(rh, 0, r.spocks[0], &f.verifiers[2]));
        let pb2 = f.app.build(&b1, &f.tree);
        assert_eq!(pb2.seals.len(), 1);
        assert_eq!(pb2.seals[0].result_hash, rh);
        let b2 = wrap(&b1, pb2.clone());
        assert_eq!(f.app.validate(&b2, &f.tree), Validation::Accept);

        let mut short = pb2;
        short.seals[0].approvals.truncate(2);
        let b2 = wrap(&b1, short);
        assert_eq!(reason(&mut f, &b2), Some(8));
    }

    #[test]
    fn missing_collection_challenge_times_out_into_slash() {
        let mut f = fixture();
        let g = guarantee(&f, "a", &[0, 1, 2]);
        f.app.guarantees.insert(g.collection_hash, g.clone());
        let pb = f.app.build(&f.genesis.clone(), &f.tree);
        let b1 = wrap(&f.genesis, pb);
        f.tree.insert(b1.clone());
        f.app.on_finalized(&b1);
        let mcc = MissingCollectionChallenge::sign(g.clone(), b1.payload.hash(), &f.executor);
        f.app.add_challenge(ChallengeEnvelope::MissingCollection(mcc.clone()));
        let mut parent = b1;
        let before: u64 = g.guarantors().iter().map(|k| f.app.finalized().state.node(*k).unwrap().stake).sum();
        for _ in 0..6 {
            let pb = f.app.build(&parent, &f.tree);
            let b = wrap(&parent, pb);
            assert_eq!(f.app.validate(&b, &f.tree), Validation::Accept);
            f.tree.insert(b.clone());
            f.app.on_finalized(&b);
            parent = b;
        }
        let state = &f.app.finalized().state;
        let after: u64 = g.guarantors().iter().map(|k| state.node(*k).unwrap().stake).sum();
        assert!(after < before);
        let att = attested_missing(state);
        assert_eq!(att.len(), 1);
        assert_eq!(att[0].collection_hash, g.collection_hash);
        // a second challenge on the same collection is not admitted
        f.app.add_challenge(ChallengeEnvelope::MissingCollection(mcc));
        assert!(f.app.build(&parent, &f.tree).challenges.is_empty());
    }

    #[test]
    fn any_quorum_of_shares_gives_the_same_randomness() {
        let params = ThresholdParams::new(7, GroupParams::tiny()).unwrap();
        let entropy: Vec<Seed> = (0..7u8).map(|i| Seed(hash(b"entropy", &[i]))).collect();
        let dkg = dkg_setup(&params, &entropy).unwrap();
        let f = fixture();
        let proto = Arc::new(f.app.genesis_proto());
        let shares: Vec<SignatureShare> =
            dkg.shares.iter().map(|s| randomness_share(&params.group, s, &proto.hash())).collect();
        let pick = |idx: &[u32]| -> Vec<SignatureShare> {
            shares.iter().filter(|s| idx.contains(&s.index)).cloned().collect()
        };
        let a = attach_randomness(proto.clone(), &pick(&[1, 2, 4, 6]), &params, &dkg.verification).unwrap();
        let b = attach_randomness(proto.clone(), &pick(&[2, 3, 5, 7]), &params, &dkg.verification).unwrap();
        assert_eq!(a.source_of_randomness, b.source_of_randomness);
        assert!(a.verify(&params.group, &dkg.verification.group_public_key));
        assert!(matches!(
            attach_randomness(proto, &pick(&[1, 2, 3]), &params, &dkg.verification),
            Err(CryptoError::InsufficientShares { have: 3, need: 4 })
        ));
    }
}

// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use super::types::{
    sign_proposal, timeout_bytes, vote_bytes, EquivocationEvidence, HsBlock, Message, Payload,
    Proposal, QuorumCertificate, TimeoutMsg, Vote,
};
use crate::crypto::{derive_seed, Digest, StakingKey, StakingKeyPair, StakingSignature};
use crate::state::{meets_supermajority, Committee};

/// Stake-weighted draw: a word from the stream seeded by
/// `derive_seed(["leader"], seed || round)` picks a point in the cumulative
/// stake line of the sorted committee.
pub fn leader_for_round(round: u64, committee: &Committee, seed: &[u8]) -> StakingKey {
    let members = committee.members();
    assert!(!members.is_empty(), "empty committee");
    let total = committee.total_stake();
    if members.len() == 1 || total == 0 {
        return members[0].0;
    }
    let total = u64::try_from(total).expect("total stake fits in u64");
    let mut material = seed.to_vec();
    material.extend_from_slice(&round.to_be_bytes());
    let mut stream = derive_seed(&["leader"], &material).expect("non-empty").stream();
    let mut point = stream.next_below(total);
    for (k, s) in members {
        if point < *s {
            return *k;
        }
        point -= s;
    }
    unreachable!("point below total stake")
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Separates signatures of different consensus instances.
    pub domain: Vec<u8>,
    pub committee: Committee,
    pub leader_seed: Vec<u8>,
    pub base_timeout: u64,
    /// Delay between entering a round and proposing in it.
    pub proposal_delay: u64,
    /// Timeout growth stops after this many doublings.
    pub max_doublings: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Accept,
    Reject(String),
    /// Missing data; re-evaluated on [`Engine::retry_pending`].
    Defer,
}

pub trait App<P> {
    fn propose(&mut self, parent: &HsBlock<P>, tree: &BlockTree<P>) -> P;
    fn validate(&mut self, block: &HsBlock<P>, tree: &BlockTree<P>) -> Validation;
    /// Called as each block is finalized, before the engine validates
    /// anything that builds on it.
    fn on_commit(&mut self, _block: &HsBlock<P>) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ConsensusEvent {
    Proposed { round: u64, height: u64, block: Digest },
    Voted { round: u64, block: Digest },
    QcFormed { round: u64, block: Digest, signers: usize },
    Finalized { round: u64, height: u64, block: Digest },
    Timeout { round: u64, next_timeout: u64 },
    RoundEntered { round: u64, via: &'static str },
    Rejected { round: u64, block: Digest, reason: String },
    Deferred { round: u64, block: Digest },
}

#[derive(Debug, Clone)]
pub enum Action<P> {
    Broadcast(Message<P>),
    Send(StakingKey, Message<P>),
    /// Local timer for `round`, after `after` ticks of the node's clock.
    ScheduleTimeout { round: u64, after: u64 },
    ScheduleProposal { round: u64, after: u64 },
    Log(ConsensusEvent),
    Finalized(Arc<HsBlock<P>>),
    Equivocation(EquivocationEvidence),
    /// A block to finalize does not extend the finalized chain.
    SafetyViolation { finalized: Digest, conflicting: Digest },
}

/// Blocks known to one node plus its finalized tip.
#[derive(Debug, Clone)]
pub struct BlockTree<P> {
    blocks: HashMap<Digest, Arc<HsBlock<P>>>,
    finalized: Digest,
    finalized_height: u64,
    genesis: Digest,
}

impl<P> BlockTree<P> {
    /// A tree holding only `genesis`, which is also the finalized tip.
    pub fn new(genesis: Arc<HsBlock<P>>) -> Self {
        let gid = genesis.id();
        Self { blocks: [(gid, genesis)].into(), finalized: gid, finalized_height: 0, genesis: gid }
    }

    /// Adds a block without any checks. The engine uses its own paths.
    pub fn insert(&mut self, block: Arc<HsBlock<P>>) {
        self.blocks.insert(block.id(), block);
    }

    pub fn get(&self, id: &Digest) -> Option<&Arc<HsBlock<P>>> {
        self.blocks.get(id)
    }

    pub fn contains(&self, id: &Digest) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn finalized_id(&self) -> Digest {
        self.finalized
    }

    pub fn finalized_height(&self) -> u64 {
        self.finalized_height
    }

    pub fn genesis_id(&self) -> Digest {
        self.genesis
    }

    /// Blocks strictly above the finalized tip up to and including `id`, in
    /// chain order. `None` if `id` does not descend from the finalized tip or
    /// an ancestor is missing.
    pub fn pending_chain(&self, id: &Digest) -> Option<Vec<Arc<HsBlock<P>>>> {
        let mut out = Vec::new();
        let mut cur = *id;
        while cur != self.finalized {
            let b = self.blocks.get(&cur)?;
            if b.height <= self.finalized_height {
                return None;
            }
            out.push(b.clone());
            cur = b.parent;
        }
        out.reverse();
        Some(out)
    }

    /// True if `id` equals or descends from `ancestor`.
    pub fn extends(&self, id: &Digest, ancestor: &Digest) -> bool {
        let Some(target) = self.blocks.get(ancestor) else { return false };
        let mut cur = *id;
        loop {
            if cur == *ancestor {
                return true;
            }
            match self.blocks.get(&cur) {
                Some(b) if b.height > target.height => cur = b.parent,
                _ => return false,
            }
        }
    }
}

pub struct Engine<P> {
    cfg: EngineConfig,
    me: StakingKeyPair,
    tree: BlockTree<P>,
    high_qc: QuorumCertificate,
    locked_round: u64,
    locked_id: Digest,
    last_voted_round: u64,
    round: u64,
    timeout_len: u64,
    consecutive_timeouts: u32,
    proposed_rounds: BTreeSet<u64>,
    timed_out_rounds: BTreeSet<u64>,
    votes: HashMap<Digest, (u64, BTreeMap<StakingKey, StakingSignature>)>,
    certified: HashMap<Digest, u64>,
    timeouts: BTreeMap<u64, BTreeMap<StakingKey, TimeoutMsg>>,
    seen: HashMap<(u64, StakingKey), (Digest, StakingSignature)>,
    equivocated_rounds: BTreeSet<u64>,
    orphans: HashMap<Digest, Vec<(StakingKey, Proposal<P>)>>,
    signatures: HashMap<Digest, StakingSignature>,
    deferred: Vec<Proposal<P>>,
    /// Byzantine switches, honest by default.
    pub equivocate: bool,
    pub ignore_safety: bool,
}

impl<P: Payload> Engine<P> {
    pub fn new(cfg: EngineConfig, me: StakingKeyPair, genesis_payload: P) -> Self {
        let genesis = Arc::new(HsBlock::genesis(&cfg.domain, genesis_payload));
        let gid = genesis.id();
        let mut blocks = HashMap::new();
        blocks.insert(gid, genesis);
        let timeout_len = cfg.base_timeout;
        let mut certified = HashMap::new();
        certified.insert(gid, 0);
        Self {
            cfg,
            me,
            tree: BlockTree { blocks, finalized: gid, finalized_height: 0, genesis: gid },
            high_qc: QuorumCertificate::genesis(gid),
            locked_round: 0,
            locked_id: gid,
            last_voted_round: 0,
            round: 0,
            timeout_len,
            consecutive_timeouts: 0,
            proposed_rounds: BTreeSet::new(),
            timed_out_rounds: BTreeSet::new(),
            votes: HashMap::new(),
            certified,
            timeouts: BTreeMap::new(),
            seen: HashMap::new(),
            equivocated_rounds: BTreeSet::new(),
            orphans: HashMap::new(),
            signatures: HashMap::new(),
            deferred: Vec::new(),
            equivocate: false,
            ignore_safety: false,
        }
    }

    pub fn tree(&self) -> &BlockTree<P> {
        &self.tree
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn high_qc(&self) -> &QuorumCertificate {
        &self.high_qc
    }

    pub fn locked_round(&self) -> u64 {
        self.locked_round
    }

    pub fn timeout_len(&self) -> u64 {
        self.timeout_len
    }

    pub fn key(&self) -> StakingKey {
        self.me.public()
    }

    pub fn committee(&self) -> &Committee {
        &self.cfg.committee
    }

    pub fn domain(&self) -> &[u8] {
        &self.cfg.domain
    }

    pub fn leader(&self, round: u64) -> StakingKey {
        leader_for_round(round, &self.cfg.committee, &self.cfg.leader_seed)
    }

    fn is_genesis_qc(&self, qc: &QuorumCertificate) -> bool {
        qc.round == 0 && qc.block_id == self.tree.genesis && qc.votes.is_empty()
    }

    fn qc_valid(&self, qc: &QuorumCertificate) -> bool {
        self.is_genesis_qc(qc) || qc.verify(&self.cfg.domain, &self.cfg.committee)
    }

    /// Enters round 1.
    pub fn start(&mut self) -> Vec<Action<P>> {
        let mut out = Vec::new();
        self.enter_round(1, "start", &mut out);
        out
    }

    fn enter_round(&mut self, round: u64, via: &'static str, out: &mut Vec<Action<P>>) {
        if round <= self.round {
            return;
        }
        self.round = round;
        if via == "timeout" {
            self.consecutive_timeouts = (self.consecutive_timeouts + 1).min(self.cfg.max_doublings);
        } else {
            self.consecutive_timeouts = 0;
        }
        self.timeout_len = self.cfg.base_timeout << self.consecutive_timeouts;
        out.push(Action::Log(ConsensusEvent::RoundEntered { round, via }));
        out.push(Action::ScheduleTimeout { round, after: self.timeout_len });
        if self.leader(round) == self.me.public() {
            out.push(Action::ScheduleProposal { round, after: self.cfg.proposal_delay });
        }
        // drop bookkeeping of long-past rounds
        let keep = round.saturating_sub(8);
        self.timeouts = self.timeouts.split_off(&keep);
        self.seen.retain(|(r, _), _| *r + 64 >= round);
        self.votes.retain(|_, (r, _)| *r + 8 >= round);
    }

    pub fn on_proposal_timer(&mut self, round: u64, app: &mut dyn App<P>) -> Vec<Action<P>> {
        let mut out = Vec::new();
        if round != self.round || self.proposed_rounds.contains(&round) || self.leader(round) != self.me.public() {
            return out;
        }
        let Some(parent) = self.tree.get(&self.high_qc.block_id).cloned() else {
            return out;
        };
        self.proposed_rounds.insert(round);
        let payload = app.propose(&parent, &self.tree);
        let salts: &[u64] = if self.equivocate { &[0, 1] } else { &[0] };
        for &salt in salts {
            let block = Arc::new(HsBlock::new(
                &self.cfg.domain,
                round,
                parent.height + 1,
                parent.id(),
                self.high_qc.clone(),
                payload.clone(),
                self.me.public(),
                salt,
            ));
            out.push(Action::Log(ConsensusEvent::Proposed { round, height: block.height, block: block.id() }));
            let p = sign_proposal(&self.cfg.domain, block, &self.me);
            out.push(Action::Broadcast(Message::Proposal(p.clone())));
            if salt == 0 {
                let me = self.me.public();
                self.on_proposal(me, p, app, &mut out);
            }
        }
        out
    }

    pub fn on_timer(&mut self, round: u64, app: &mut dyn App<P>) -> Vec<Action<P>> {
        let mut out = Vec::new();
        if round == self.round {
            self.local_timeout(round, app, &mut out);
        }
        out
    }

    fn local_timeout(&mut self, round: u64, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        let first = self.timed_out_rounds.insert(round);
        let msg = TimeoutMsg {
            round,
            high_qc: self.high_qc.clone(),
            voter: self.me.public(),
            signature: self.me.sign(&timeout_bytes(&self.cfg.domain, round, self.high_qc.round)),
        };
        if first {
            out.push(Action::Log(ConsensusEvent::Timeout { round, next_timeout: self.timeout_len.saturating_mul(2) }));
        }
        // repeated until the round is left, in case the first copies were lost
        out.push(Action::Broadcast(Message::Timeout(msg.clone())));
        out.push(Action::ScheduleTimeout { round, after: self.timeout_len });
        if first {
            self.record_timeout(msg, app, out);
        }
    }

    pub fn on_message(&mut self, from: StakingKey, msg: Message<P>, app: &mut dyn App<P>) -> Vec<Action<P>> {
        let mut out = Vec::new();
        match msg {
            Message::Proposal(p) => self.on_proposal(from, p, app, &mut out),
            Message::Vote(v) => self.on_vote(v, app, &mut out),
            Message::Timeout(t) => self.on_timeout_msg(t, app, &mut out),
            Message::RequestBlock(id) => {
                // relay the proposer's original signature
                if let (Some(b), Some(sig)) = (self.tree.get(&id), self.signatures.get(&id)) {
                    out.push(Action::Send(from, Message::Proposal(Proposal { block: b.clone(), signature: *sig })));
                }
            }
        }
        out
    }

    fn on_proposal(&mut self, from: StakingKey, p: Proposal<P>, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        let b = p.block.clone();
        let id = b.id();
        if b.round == 0 || b.proposer != self.leader(b.round) {
            out.push(Action::Log(ConsensusEvent::Rejected { round: b.round, block: id, reason: "proposer is not the round leader".into() }));
            return;
        }
        if !b.proposer.verify(&super::types::proposal_bytes(&self.cfg.domain, &id), &p.signature) {
            return;
        }
        match self.seen.get(&(b.round, b.proposer)) {
            Some((other, sig)) if *other != id => {
                if self.equivocated_rounds.insert(b.round) {
                    out.push(Action::Equivocation(EquivocationEvidence {
                        proposer: b.proposer,
                        round: b.round,
                        first: (*other, *sig),
                        second: (id, p.signature),
                    }));
                }
                // still stored below: a certified descendant may need it as
                // its ancestor, but nobody votes in an equivocated round
            }
            Some(_) => {}
            None => {
                self.seen.insert((b.round, b.proposer), (id, p.signature));
            }
        }
        if self.tree.contains(&id) {
            return;
        }
        if b.parent != b.justify.block_id || !self.qc_valid(&b.justify) {
            out.push(Action::Log(ConsensusEvent::Rejected { round: b.round, block: id, reason: "bad justification".into() }));
            return;
        }
        let Some(parent) = self.tree.get(&b.parent).cloned() else {
            self.orphans.entry(b.parent).or_default().push((from, p));
            out.push(Action::Send(from, Message::RequestBlock(b.parent)));
            return;
        };
        if b.height != parent.height + 1 || b.round <= parent.round {
            return;
        }
        self.tree.blocks.insert(id, b.clone());
        self.signatures.insert(id, p.signature);
        self.process_qc(&b.justify.clone(), app, out);
        if b.round > self.round {
            let via = if b.justify.round + 1 == b.round { "qc" } else { "proposal" };
            self.enter_round(b.round, via, out);
        }
        self.try_vote(&p, app, out);
        if let Some(children) = self.orphans.remove(&id) {
            for (f, child) in children {
                self.on_proposal(f, child, app, out);
            }
        }
    }

    fn safe_to_vote(&self, b: &HsBlock<P>) -> bool {
        b.round == self.round
            && b.round > self.last_voted_round
            && !self.equivocated_rounds.contains(&b.round)
            && (self.tree.extends(&b.id(), &self.locked_id) || b.justify.round > self.locked_round)
    }

    fn try_vote(&mut self, p: &Proposal<P>, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        let b = &p.block;
        let stale_ok = self.ignore_safety && b.round + 1 >= self.round;
        if !self.safe_to_vote(b) && !stale_ok {
            return;
        }
        if !self.cfg.committee.contains(self.me.public()) {
            return;
        }
        match app.validate(b, &self.tree) {
            Validation::Accept => {}
            Validation::Reject(reason) => {
                out.push(Action::Log(ConsensusEvent::Rejected { round: b.round, block: b.id(), reason }));
                return;
            }
            Validation::Defer => {
                if !self.deferred.iter().any(|d| d.block.id() == b.id()) {
                    self.deferred.push(p.clone());
                    out.push(Action::Log(ConsensusEvent::Deferred { round: b.round, block: b.id() }));
                }
                return;
            }
        }
        self.last_voted_round = self.last_voted_round.max(b.round);
        let vote = Vote {
            block_id: b.id(),
            round: b.round,
            voter: self.me.public(),
            signature: self.me.sign(&vote_bytes(&self.cfg.domain, &b.id(), b.round)),
        };
        out.push(Action::Log(ConsensusEvent::Voted { round: b.round, block: b.id() }));
        let next_leader = self.leader(b.round + 1);
        if next_leader == self.me.public() {
            self.on_vote(vote, app, out);
        } else {
            out.push(Action::Send(next_leader, Message::Vote(vote)));
        }
    }

    /// Re-evaluates proposals whose validation was deferred.
    pub fn retry_pending(&mut self, app: &mut dyn App<P>) -> Vec<Action<P>> {
        let mut out = Vec::new();
        if self.deferred.is_empty() {
            return out;
        }
        let pending = std::mem::take(&mut self.deferred);
        for p in pending {
            if p.block.round == self.round && p.block.round > self.last_voted_round {
                self.try_vote(&p, app, &mut out);
            }
        }
        out
    }

    pub fn has_deferred(&self) -> bool {
        !self.deferred.is_empty()
    }

    fn on_vote(&mut self, v: Vote, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        if !self.cfg.committee.contains(v.voter)
            || self.leader(v.round + 1) != self.me.public()
            || v.round + 8 < self.round
            || self.certified.contains_key(&v.block_id)
            || !v.voter.verify(&vote_bytes(&self.cfg.domain, &v.block_id, v.round), &v.signature)
        {
            return;
        }
        let entry = self.votes.entry(v.block_id).or_insert_with(|| (v.round, BTreeMap::new()));
        if entry.0 != v.round {
            return;
        }
        entry.1.insert(v.voter, v.signature);
        if !self.cfg.committee.effective_votes(entry.1.keys()).is_ok_and(meets_supermajority) {
            return;
        }
        let qc = QuorumCertificate {
            block_id: v.block_id,
            round: v.round,
            votes: entry.1.iter().map(|(k, s)| (*k, *s)).collect(),
        };
        out.push(Action::Log(ConsensusEvent::QcFormed { round: qc.round, block: qc.block_id, signers: qc.votes.len() }));
        self.process_qc(&qc, app, out);
        if self.round == qc.round + 1 && self.leader(self.round) == self.me.public() && self.tree.contains(&qc.block_id) {
            // entering via the QC already scheduled a proposal unless we were
            // in this round before; make sure one is pending
            if !self.proposed_rounds.contains(&self.round) {
                out.push(Action::ScheduleProposal { round: self.round, after: self.cfg.proposal_delay });
            }
        }
    }

    fn on_timeout_msg(&mut self, t: TimeoutMsg, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        if !self.cfg.committee.contains(t.voter)
            || t.round < self.round
            || !t.voter.verify(&timeout_bytes(&self.cfg.domain, t.round, t.high_qc.round), &t.signature)
            || !self.qc_valid(&t.high_qc)
        {
            return;
        }
        self.record_timeout(t, app, out);
    }

    fn record_timeout(&mut self, t: TimeoutMsg, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        let round = t.round;
        if self.tree.contains(&t.high_qc.block_id) {
            self.process_qc(&t.high_qc.clone(), app, out);
        }
        let set = self.timeouts.entry(round).or_default();
        set.insert(t.voter, t);
        let stake = self.cfg.committee.effective_votes(set.keys());
        let Ok(fraction) = stake else { return };
        // more than 1/3 timed out: join them so the round can be abandoned
        if fraction * 3u128 > num_rational::Ratio::from_integer(1) && round >= self.round && !self.timed_out_rounds.contains(&round) {
            if round > self.round {
                self.enter_round(round, "timeout-sync", out);
            }
            self.local_timeout(round, app, out);
        }
        let set = &self.timeouts[&round];
        if self.cfg.committee.effective_votes(set.keys()).is_ok_and(meets_supermajority) && round >= self.round {
            self.enter_round(round + 1, "timeout", out);
        }
    }

    fn process_qc(&mut self, qc: &QuorumCertificate, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        let Some(b3) = self.tree.get(&qc.block_id).cloned() else { return };
        self.certified.entry(qc.block_id).or_insert(qc.round);
        if qc.round > self.high_qc.round {
            self.high_qc = qc.clone();
        }
        if qc.round + 1 > self.round {
            self.enter_round(qc.round + 1, "qc", out);
        }
        // lock on the block certified by b3's justification
        if let Some(b2) = self.tree.get(&b3.justify.block_id).cloned() {
            if b2.round > self.locked_round {
                self.locked_round = b2.round;
                self.locked_id = b2.id();
            }
        }
        // b0 <- b1 <- b2 <- b3, all certified, direct parents, consecutive rounds
        let chain = (|| {
            let b2 = self.tree.get(&b3.parent)?.clone();
            let b1 = self.tree.get(&b2.parent)?.clone();
            let b0 = self.tree.get(&b1.parent)?.clone();
            let consecutive = b3.round == b2.round + 1 && b2.round == b1.round + 1 && b1.round == b0.round + 1;
            consecutive.then_some(b0)
        })();
        if let Some(b0) = chain {
            self.commit(b0, app, out);
        }
    }

    fn commit(&mut self, b0: Arc<HsBlock<P>>, app: &mut dyn App<P>, out: &mut Vec<Action<P>>) {
        if b0.height <= self.tree.finalized_height {
            return;
        }
        let Some(chain) = self.tree.pending_chain(&b0.id()) else {
            out.push(Action::SafetyViolation { finalized: self.tree.finalized, conflicting: b0.id() });
            return;
        };
        for b in chain {
            self.tree.finalized = b.id();
            self.tree.finalized_height = b.height;
            app.on_commit(&b);
            out.push(Action::Log(ConsensusEvent::Finalized { round: b.round, height: b.height, block: b.id() }));
            out.push(Action::Finalized(b));
        }
        self.prune();
    }

    /// Forgets blocks that can no longer matter: anything at or below the
    /// finalized height other than the recent finalized ancestry.
    fn prune(&mut self) {
        let fh = self.tree.finalized_height;
        if fh % 64 != 0 {
            return;
        }
        let keep_from = fh.saturating_sub(64);
        let mut keep = BTreeSet::new();
        let mut cur = self.tree.finalized;
        while let Some(b) = self.tree.blocks.get(&cur) {
            keep.insert(cur);
            if b.height <= keep_from || b.height == 0 {
                break;
            }
            cur = b.parent;
        }
        let genesis = self.tree.genesis;
        self.tree.blocks.retain(|id, b| b.height > fh || keep.contains(id) || *id == genesis);
        let blocks = &self.tree.blocks;
        self.certified.retain(|id, _| blocks.contains_key(id));
        self.signatures.retain(|id, _| blocks.contains_key(id));
    }
}

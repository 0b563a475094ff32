// SPDX-License-Identifier: Apache-2.0

//! Node state machines. Handlers only read the shared directory and push
//! their effects to [`Ctx`]; the world applies them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde_json::{json, Value};

use super::net::NodeId;
use crate::block::{
    attach_randomness, attested_missing, randomness_share, Block, ChainApp, ChallengeEnvelope, ProtoBlock,
};
use crate::collection::{
    check_well_formed, collection_hash, serve_collection, validate_transaction, ClusterPayload,
    CollectorApp, GuaranteeAggregator, GuaranteeVote, GuaranteedCollection, GuarantorStore, IngestAttestation,
    Retrieval, RetrievalStep,
};
use crate::clustering::route_transaction;
use crate::crypto::{
    Digest, GroupParams, SecretShare, SeededStream, SignatureShare, StakingKey, StakingKeyPair, ThresholdParams,
    VerificationVector,
};
use crate::execution::{block_execution, ChunkDataPack, ExecutionEvent, ExecutionReceipt, ExecutionState, FaultInjection};
use crate::hotstuff::{Action, ConsensusEvent, Engine, Message};
use crate::state::{ChallengeKind, Change, Committee, ProtocolState};
use crate::transaction::{Op, Script, ScriptOp, SignedTransaction};
use crate::verification::{
    assign_chunks, verify_chunk, BlockInputs, ChunkVerdict, MccResponse, MissingCollectionChallenge, ResultApproval,
    SignedDataPack,
};

/// Receipt plus everything a verifier needs to check its chunks.
#[derive(Debug)]
pub struct ExecutionBundle {
    pub receipt: ExecutionReceipt,
    pub inputs: BlockInputs,
    pub packs: Vec<SignedDataPack>,
}

#[derive(Debug, Clone)]
pub enum Msg {
    Consensus(Message<ProtoBlock>),
    Cluster(Message<ClusterPayload>),
    SubmitTx(SignedTransaction),
    IngestTx(SignedTransaction, IngestAttestation),
    GuaranteeVote(GuaranteeVote),
    Guarantee(GuaranteedCollection),
    RandomnessShare { proto: Digest, share: SignatureShare },
    FinalBlock(Arc<Block>),
    CollectionRequest(Digest),
    CollectionResponse { collection: Digest, texts: Option<Vec<SignedTransaction>> },
    Receipt(ExecutionReceipt),
    Bundle(Arc<ExecutionBundle>),
    Approval(ResultApproval),
    Challenge(ChallengeEnvelope),
    MccQuery { challenge_id: Digest, collection: Digest },
    MccResponse(MccResponse),
    /// Heights of finalized blocks the sender is missing.
    BlockRequest(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    HsTimeout(u64),
    HsPropose(u64),
    Retrieval { collection: Digest, attempt: u64 },
    ClientTick,
    Resend,
}

/// How long an executor waits for a seal before sending its receipt again.
const RESEND_EVERY: u64 = 2000;
/// Heights asked for in one block request.
const SYNC_BATCH: u64 = 16;

fn missing_below(next: u64, top: u64, have: impl Fn(u64) -> bool) -> Vec<u64> {
    (next..top).filter(|h| !have(*h)).take(SYNC_BATCH as usize).collect()
}

pub enum Out {
    Send(NodeId, Msg),
    Timer(u64, TimerKind),
    Log(&'static str, Digest, Value),
}

/// Static facts every node may consult.
pub struct Directory {
    pub names: Vec<String>,
    pub keys: Vec<StakingKey>,
    pub by_key: HashMap<StakingKey, NodeId>,
    pub consensus: Vec<NodeId>,
    pub collectors: Vec<NodeId>,
    pub executors: Vec<NodeId>,
    pub verifiers: Vec<NodeId>,
    pub clients: Vec<NodeId>,
    pub drb: Vec<NodeId>,
    pub clusters: Vec<Vec<NodeId>>,
    pub cluster_committees: Vec<Committee>,
    pub threshold: ThresholdParams,
    pub vv: VerificationVector,
    pub genesis_proto: Digest,
    pub chunk_budget: u64,
    pub coverage: f64,
    pub tx_window: u64,
    pub retrieval_timeout: u64,
}

impl Directory {
    pub fn group(&self) -> &GroupParams {
        &self.threshold.group
    }

    pub fn node_of(&self, key: &StakingKey) -> Option<NodeId> {
        self.by_key.get(key).copied()
    }
}

/// Run-wide facts gathered for metrics and the property report.
#[derive(Default)]
pub struct Observations {
    /// Finalized proto-block hashes per consensus node, by height - 1.
    pub finalized: BTreeMap<NodeId, Vec<Digest>>,
    pub finalize_events: Vec<(u64, NodeId, u64)>,
    pub proposals: Vec<(u64, u64)>,
    pub safety_violations: u64,
    pub faulty_results: BTreeSet<Digest>,
    pub receipts: BTreeMap<StakingKey, HashMap<Digest, ExecutionReceipt>>,
    pub exec_tips: BTreeMap<StakingKey, Digest>,
    pub faulty_executors: BTreeSet<StakingKey>,
    pub withheld: Vec<GuaranteedCollection>,
    pub tx_submitted: HashMap<Digest, u64>,
    pub submitted_count: u64,
    pub collection_txs: HashMap<Digest, Vec<Digest>>,
    pub latencies: Vec<u64>,
    /// Consensus node whose finalized chain the metrics are taken from.
    pub reference: NodeId,
    pub chain: Vec<Arc<ProtoBlock>>,
    pub equivocations_detected: u64,
}

pub struct Ctx<'a> {
    pub now: u64,
    pub me: NodeId,
    pub dir: &'a Directory,
    pub obs: &'a mut Observations,
    pub out: Vec<Out>,
}

impl Ctx<'_> {
    pub fn send(&mut self, to: NodeId, msg: Msg) {
        self.out.push(Out::Send(to, msg));
    }

    /// To every node in `to` except this one.
    pub fn broadcast(&mut self, to: &[NodeId], msg: Msg) {
        for &n in to {
            if n != self.me {
                self.out.push(Out::Send(n, msg.clone()));
            }
        }
    }

    pub fn timer(&mut self, after: u64, kind: TimerKind) {
        self.out.push(Out::Timer(after, kind));
    }

    pub fn log(&mut self, kind: &'static str, digest: Digest, detail: Value) {
        self.out.push(Out::Log(kind, digest, detail));
    }
}

fn verify_block(ctx: &Ctx<'_>, b: &Block) -> bool {
    b.verify(ctx.dir.group(), &ctx.dir.vv.group_public_key)
}

/// Main-chain participant: consensus engine, block formation, DRB member
/// if selected.
pub struct ConsensusNode {
    pub kp: StakingKeyPair,
    pub engine: Engine<ProtoBlock>,
    pub app: ChainApp,
    pub drb_share: Option<SecretShare>,
    shares: HashMap<Digest, Vec<SignatureShare>>,
    awaiting: HashMap<Digest, Arc<ProtoBlock>>,
    known: HashSet<Digest>,
    blocks: BTreeMap<u64, Arc<Block>>,
}

impl ConsensusNode {
    pub fn new(kp: StakingKeyPair, engine: Engine<ProtoBlock>, app: ChainApp, drb_share: Option<SecretShare>) -> Self {
        Self { kp, engine, app, drb_share, shares: HashMap::new(), awaiting: HashMap::new(), known: HashSet::new(), blocks: BTreeMap::new() }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        let a = self.engine.start();
        self.apply(ctx, a);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, t: TimerKind) {
        let a = match t {
            TimerKind::HsTimeout(r) => self.engine.on_timer(r, &mut self.app),
            TimerKind::HsPropose(r) => self.engine.on_proposal_timer(r, &mut self.app),
            _ => return,
        };
        self.apply(ctx, a);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Msg) {
        match msg {
            Msg::Consensus(m) => {
                let a = self.engine.on_message(ctx.dir.keys[from], m, &mut self.app);
                self.apply(ctx, a);
                return;
            }
            Msg::Guarantee(g) => self.app.add_guarantee(g),
            Msg::Receipt(r) => {
                if r.verify_signature() {
                    self.app.add_receipt(r);
                }
            }
            Msg::Approval(a) => {
                if a.verify() {
                    self.app.add_approval(a);
                }
            }
            Msg::Challenge(c) => self.app.add_challenge(c),
            Msg::MccResponse(r) => self.app.add_response(r),
            Msg::RandomnessShare { proto, share } => {
                if self.drb_share.is_some() && !self.known.contains(&proto) {
                    let list = self.shares.entry(proto).or_default();
                    if !list.iter().any(|s| s.index == share.index) {
                        list.push(share);
                    }
                    self.try_recover(ctx, proto);
                }
                return;
            }
            Msg::FinalBlock(b) => {
                if !self.known.contains(&b.proto.hash()) && verify_block(ctx, &b) {
                    let h = b.proto.height;
                    let mut gaps: Vec<u64> = self.awaiting.values().map(|p| p.height).filter(|x| *x < h).collect();
                    gaps.sort_unstable();
                    if !gaps.is_empty() {
                        ctx.send(from, Msg::BlockRequest(gaps));
                    }
                    self.accept_block(ctx, b, false);
                }
                return;
            }
            Msg::BlockRequest(heights) => {
                for h in heights {
                    if let Some(b) = self.blocks.get(&h) {
                        ctx.send(from, Msg::FinalBlock(b.clone()));
                    }
                }
                return;
            }
            _ => return,
        }
        self.retry(ctx);
    }

    fn retry(&mut self, ctx: &mut Ctx<'_>) {
        if self.engine.has_deferred() {
            let a = self.engine.retry_pending(&mut self.app);
            self.apply(ctx, a);
        }
    }

    fn apply(&mut self, ctx: &mut Ctx<'_>, actions: Vec<Action<ProtoBlock>>) {
        for a in actions {
            match a {
                Action::Broadcast(m) => ctx.broadcast(&ctx.dir.consensus.clone(), Msg::Consensus(m)),
                Action::Send(k, m) => {
                    if let Some(n) = ctx.dir.node_of(&k) {
                        ctx.send(n, Msg::Consensus(m));
                    }
                }
                Action::ScheduleTimeout { round, after } => ctx.timer(after, TimerKind::HsTimeout(round)),
                Action::ScheduleProposal { round, after } => ctx.timer(after, TimerKind::HsPropose(round)),
                Action::Log(e) => log_consensus(ctx, e, "", true),
                Action::Finalized(b) => {
                    let pb = Arc::new(b.payload.clone());
                    self.on_finalized(ctx, pb, b.round);
                }
                Action::Equivocation(ev) => {
                    ctx.obs.equivocations_detected += 1;
                    ctx.log("equivocation_detected", ev.first.0, json!({ "round": ev.round, "proposer": ctx.dir.node_of(&ev.proposer).map(|n| ctx.dir.names[n].clone()) }));
                    let env = ChallengeEnvelope::Equivocation { evidence: ev, reporter: self.kp.public() };
                    self.app.add_challenge(env.clone());
                    ctx.broadcast(&ctx.dir.consensus.clone(), Msg::Challenge(env));
                }
                Action::SafetyViolation { finalized, conflicting } => {
                    ctx.obs.safety_violations += 1;
                    ctx.log("safety_violation", conflicting, json!({ "finalized": finalized.to_hex() }));
                }
            }
        }
    }

    fn on_finalized(&mut self, ctx: &mut Ctx<'_>, pb: Arc<ProtoBlock>, round: u64) {
        let h = pb.hash();
        let me = ctx.me;
        let list = ctx.obs.finalized.entry(me).or_default();
        list.push(h);
        ctx.obs.finalize_events.push((ctx.now, me, pb.height));
        ctx.log(
            "finalized",
            h,
            json!({ "height": pb.height, "round": round, "collections": pb.guaranteed_collections.len(), "seals": pb.seals.len(), "challenges": pb.challenges.len() }),
        );
        if me == ctx.obs.reference {
            for g in &pb.guaranteed_collections {
                if let Some(txs) = ctx.obs.collection_txs.get(&g.collection_hash) {
                    for t in txs {
                        if let Some(t0) = ctx.obs.tx_submitted.remove(t) {
                            ctx.obs.latencies.push(ctx.now - t0);
                        }
                    }
                }
            }
            ctx.obs.chain.push(pb.clone());
        }
        for u in &pb.state_updates {
            for c in &u.changes {
                if let Change::RecordChallenge(ch) = c {
                    if ch.kind == ChallengeKind::MissingCollection {
                        let id = ch.id();
                        let collection = ch.evidence[0];
                        for k in &ch.accused {
                            if let Some(n) = ctx.dir.node_of(k) {
                                ctx.send(n, Msg::MccQuery { challenge_id: id, collection });
                            }
                        }
                    }
                }
            }
        }
        if let Some(share) = &self.drb_share {
            let s = randomness_share(ctx.dir.group(), share, &h);
            ctx.broadcast(&ctx.dir.drb.clone(), Msg::RandomnessShare { proto: h, share: s.clone() });
            let list = self.shares.entry(h).or_default();
            if !list.iter().any(|x| x.index == s.index) {
                list.push(s);
            }
        }
        if !self.known.contains(&h) {
            self.awaiting.insert(h, pb);
            self.try_recover(ctx, h);
        }
    }

    fn try_recover(&mut self, ctx: &mut Ctx<'_>, h: Digest) {
        let Some(pb) = self.awaiting.get(&h) else { return };
        let Some(shares) = self.shares.get(&h) else { return };
        if shares.len() < ctx.dir.threshold.required_shares() {
            return;
        }
        match attach_randomness(pb.clone(), shares, &ctx.dir.threshold, &ctx.dir.vv) {
            Ok(block) => {
                ctx.log("randomness", h, json!({ "height": block.proto.height }));
                self.accept_block(ctx, Arc::new(block), true);
            }
            Err(e) => ctx.log("randomness_failed", h, json!({ "reason": e.to_string() })),
        }
    }

    fn accept_block(&mut self, ctx: &mut Ctx<'_>, block: Arc<Block>, announce: bool) {
        let h = block.proto.hash();
        if !self.known.insert(h) {
            return;
        }
        self.awaiting.remove(&h);
        self.shares.remove(&h);
        self.app.randomness.insert(h, block.randomness());
        self.blocks.insert(block.proto.height, block.clone());
        if announce {
            let d = ctx.dir;
            let all: Vec<NodeId> = d
                .consensus
                .iter()
                .chain(&d.collectors)
                .chain(&d.executors)
                .chain(&d.verifiers)
                .chain(&d.clients)
                .copied()
                .collect();
            ctx.broadcast(&all, Msg::FinalBlock(block));
        }
        self.retry(ctx);
    }
}

fn log_consensus(ctx: &mut Ctx<'_>, e: ConsensusEvent, prefix: &str, main: bool) {
    match e {
        ConsensusEvent::Proposed { round, height, block } => {
            if main {
                ctx.obs.proposals.push((ctx.now, height));
            }
            ctx.log(if main { "proposed" } else { "cluster_proposed" }, block, json!({ "round": round, "height": height, "chain": prefix }));
        }
        ConsensusEvent::Timeout { round, next_timeout } => {
            ctx.log(if main { "timeout" } else { "cluster_timeout" }, Digest::ZERO, json!({ "round": round, "next_timeout": next_timeout, "chain": prefix }));
        }
        ConsensusEvent::Rejected { round, block, reason } => {
            ctx.log(if main { "rejected" } else { "cluster_rejected" }, block, json!({ "round": round, "reason": reason, "chain": prefix }));
        }
        _ => {}
    }
}

/// Collector: cluster consensus, transaction ingest, guarantees, storage.
pub struct CollectorNode {
    pub kp: StakingKeyPair,
    pub cluster: usize,
    pub engine: Engine<ClusterPayload>,
    pub app: CollectorApp,
    store: GuarantorStore,
    agg: GuaranteeAggregator,
    heights: HashMap<Digest, u64>,
    tip: u64,
    /// Fabricated collections this node never hands out.
    pub withheld: HashSet<Digest>,
    answered: HashSet<Digest>,
}

impl CollectorNode {
    pub fn new(kp: StakingKeyPair, cluster: usize, engine: Engine<ClusterPayload>, app: CollectorApp, genesis: Digest) -> Self {
        Self {
            kp,
            cluster,
            engine,
            app,
            store: GuarantorStore::default(),
            agg: GuaranteeAggregator::default(),
            heights: [(genesis, 0)].into(),
            tip: 0,
            withheld: HashSet::new(),
            answered: HashSet::new(),
        }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        self.app.now = ctx.now;
        let a = self.engine.start();
        self.apply(ctx, a);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, t: TimerKind) {
        self.app.now = ctx.now;
        let a = match t {
            TimerKind::HsTimeout(r) => self.engine.on_timer(r, &mut self.app),
            TimerKind::HsPropose(r) => self.engine.on_proposal_timer(r, &mut self.app),
            _ => return,
        };
        self.apply(ctx, a);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Msg) {
        self.app.now = ctx.now;
        match msg {
            Msg::Cluster(m) => {
                let a = self.engine.on_message(ctx.dir.keys[from], m, &mut self.app);
                self.apply(ctx, a);
            }
            Msg::SubmitTx(tx) => self.ingest(ctx, tx),
            Msg::IngestTx(tx, att) => {
                let h = tx.hash();
                let ok = !self.app.pool.contains(&h)
                    && self.app.cluster.contains(att.collector)
                    && att.verify(&h)
                    && check_well_formed(&tx).is_ok()
                    && route_transaction(&h, ctx.dir.clusters.len()) == self.cluster;
                if ok {
                    self.app.pool.insert(tx, att);
                    self.retry(ctx);
                }
            }
            Msg::GuaranteeVote(v) => self.on_vote(ctx, &v),
            Msg::FinalBlock(b) => {
                let h = b.proto.hash();
                if !self.heights.contains_key(&h) && verify_block(ctx, &b) {
                    self.heights.insert(h, b.proto.height);
                    self.tip = self.tip.max(b.proto.height);
                }
            }
            Msg::CollectionRequest(h) => {
                if !self.withheld.contains(&h) {
                    let texts = serve_collection(&self.store, &h).ok();
                    ctx.send(from, Msg::CollectionResponse { collection: h, texts });
                }
            }
            Msg::MccQuery { challenge_id, collection } => {
                if self.withheld.contains(&collection) || !self.answered.insert(challenge_id) {
                    return;
                }
                if let Ok(texts) = serve_collection(&self.store, &collection) {
                    let r = MccResponse { challenge_id, responder: self.kp.public(), texts };
                    ctx.log("mcc_answered", collection, Value::Null);
                    ctx.broadcast(&ctx.dir.consensus.clone(), Msg::MccResponse(r));
                }
            }
            _ => {}
        }
    }

    fn ingest(&mut self, ctx: &mut Ctx<'_>, tx: SignedTransaction) {
        let h = tx.hash();
        if self.app.pool.contains(&h) {
            return;
        }
        let res = validate_transaction(&tx, &self.heights, ctx.dir.tx_window, self.tip + 1, ctx.dir.clusters.len(), self.cluster);
        match res {
            Ok(()) => {
                let att = IngestAttestation::sign(&h, &self.kp);
                self.app.pool.insert(tx.clone(), att);
                let peers = ctx.dir.clusters[self.cluster].clone();
                ctx.broadcast(&peers, Msg::IngestTx(tx, att));
                self.retry(ctx);
            }
            Err(e) => ctx.log("tx_rejected", h, json!({ "reason": e.to_string() })),
        }
    }

    fn on_vote(&mut self, ctx: &mut Ctx<'_>, v: &GuaranteeVote) {
        if let Some(g) = self.agg.add(v, &self.app.cluster) {
            ctx.log("collection_guaranteed", g.collection_hash, json!({ "cluster": g.cluster_index, "guarantors": g.signatures.len() }));
            ctx.broadcast(&ctx.dir.consensus.clone(), Msg::Guarantee(g));
        }
    }

    fn retry(&mut self, ctx: &mut Ctx<'_>) {
        if self.engine.has_deferred() {
            let a = self.engine.retry_pending(&mut self.app);
            self.apply(ctx, a);
        }
    }

    fn apply(&mut self, ctx: &mut Ctx<'_>, actions: Vec<Action<ClusterPayload>>) {
        let peers = ctx.dir.clusters[self.cluster].clone();
        let prefix = format!("cluster-{}", self.cluster);
        for a in actions {
            match a {
                Action::Broadcast(m) => ctx.broadcast(&peers, Msg::Cluster(m)),
                Action::Send(k, m) => {
                    if let Some(n) = ctx.dir.node_of(&k) {
                        ctx.send(n, Msg::Cluster(m));
                    }
                }
                Action::ScheduleTimeout { round, after } => ctx.timer(after, TimerKind::HsTimeout(round)),
                Action::ScheduleProposal { round, after } => ctx.timer(after, TimerKind::HsPropose(round)),
                Action::Log(e @ (ConsensusEvent::Timeout { .. } | ConsensusEvent::Rejected { .. })) => {
                    log_consensus(ctx, e, &prefix, false)
                }
                Action::Log(_) | Action::Equivocation(_) => {}
                Action::Finalized(b) => {
                    let Some(col) = self.app.take_closed(&b.id()) else { continue };
                    let Some(texts) = self.app.texts(&col.tx_hashes) else {
                        ctx.log("collection_texts_missing", col.hash(), Value::Null);
                        continue;
                    };
                    let h = self.store.persist(texts);
                    for t in &col.tx_hashes {
                        self.app.pool.remove(t);
                    }
                    ctx.obs.collection_txs.entry(h).or_insert(col.tx_hashes);
                    let vote = GuaranteeVote::sign(h, self.cluster as u32, &self.kp);
                    ctx.broadcast(&peers, Msg::GuaranteeVote(vote.clone()));
                    self.on_vote(ctx, &vote);
                }
                Action::SafetyViolation { finalized, conflicting } => {
                    ctx.obs.safety_violations += 1;
                    ctx.log("safety_violation", conflicting, json!({ "finalized": finalized.to_hex(), "chain": prefix }));
                }
            }
        }
    }
}

enum Slot {
    Ready(Option<Vec<SignedTransaction>>),
    Fetching(Box<Retrieval>, u64),
    Challenged,
}

struct Job {
    block: Arc<Block>,
    slots: Vec<Slot>,
}

/// Executor: retrieves collections, executes finalized blocks in order.
pub struct ExecutorNode {
    pub kp: StakingKeyPair,
    pub fault: Option<FaultInjection>,
    blocks: BTreeMap<u64, Arc<Block>>,
    pstate: ProtocolState,
    state_height: u64,
    exec_height: u64,
    exec_state: ExecutionState,
    prev_result: Digest,
    texts: HashMap<Digest, Vec<SignedTransaction>>,
    job: Option<Job>,
    attempts: u64,
    /// Own results not sealed yet, by height, with the time they were sent.
    unsealed: BTreeMap<u64, (u64, Arc<ExecutionBundle>)>,
}

impl ExecutorNode {
    pub fn new(kp: StakingKeyPair, genesis_state: ProtocolState, genesis_result: Digest) -> Self {
        Self {
            kp,
            fault: None,
            blocks: BTreeMap::new(),
            pstate: genesis_state,
            state_height: 0,
            exec_height: 0,
            exec_state: ExecutionState::new(),
            prev_result: genesis_result,
            texts: HashMap::new(),
            job: None,
            attempts: 0,
            unsealed: BTreeMap::new(),
        }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.timer(RESEND_EVERY, TimerKind::Resend);
    }

    fn resend(&mut self, ctx: &mut Ctx<'_>) {
        let dir = ctx.dir;
        for (sent, bundle) in self.unsealed.values_mut().take(4) {
            if *sent + RESEND_EVERY <= ctx.now {
                *sent = ctx.now;
                ctx.broadcast(&dir.consensus, Msg::Receipt(bundle.receipt.clone()));
                ctx.broadcast(&dir.verifiers, Msg::Bundle(bundle.clone()));
            }
        }
        ctx.timer(RESEND_EVERY, TimerKind::Resend);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Msg) {
        match msg {
            Msg::FinalBlock(b) => {
                let height = b.proto.height;
                if height <= self.state_height || self.blocks.contains_key(&height) || !verify_block(ctx, &b) {
                    return;
                }
                let gaps = missing_below(self.state_height + 1, height, |h| self.blocks.contains_key(&h));
                if !gaps.is_empty() {
                    ctx.send(from, Msg::BlockRequest(gaps));
                }
                self.blocks.insert(height, b);
                while let Some(b) = self.blocks.get(&(self.state_height + 1)).cloned() {
                    if let Some(top) = b.proto.seals.iter().map(|s| s.height).max() {
                        self.unsealed = self.unsealed.split_off(&(top + 1));
                    }
                    for u in &b.proto.state_updates {
                        let _ = self.pstate.apply_update(u);
                    }
                    for r in &b.proto.responses {
                        let hashes: Vec<Digest> = r.texts.iter().map(|t| t.hash()).collect();
                        self.texts.entry(collection_hash(&hashes)).or_insert_with(|| r.texts.clone());
                    }
                    self.state_height += 1;
                }
                self.progress(ctx);
            }
            Msg::CollectionResponse { collection, texts } => {
                let key = ctx.dir.keys[from];
                let step = self.job.as_mut().and_then(|job| {
                    job.slots.iter_mut().find_map(|s| match s {
                        Slot::Fetching(r, _) if r.collection.collection_hash == collection => match texts.clone() {
                            Some(t) => r.on_response(key, t),
                            None => r.on_timeout(key),
                        },
                        _ => None,
                    })
                });
                if let Some(step) = step {
                    self.on_step(ctx, collection, step);
                    self.progress(ctx);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, t: TimerKind) {
        if t == TimerKind::Resend {
            return self.resend(ctx);
        }
        let TimerKind::Retrieval { collection, attempt } = t else { return };
        let step = self.job.as_mut().and_then(|job| {
            job.slots.iter_mut().find_map(|s| match s {
                Slot::Fetching(r, a) if *a == attempt && r.collection.collection_hash == collection => {
                    let cur = r.current()?;
                    r.on_timeout(cur)
                }
                _ => None,
            })
        });
        if let Some(step) = step {
            self.on_step(ctx, collection, step);
            self.progress(ctx);
        }
    }

    fn on_step(&mut self, ctx: &mut Ctx<'_>, collection: Digest, step: RetrievalStep) {
        let Some(job) = self.job.as_mut() else { return };
        let Some(idx) = job.block.proto.guaranteed_collections.iter().position(|g| g.collection_hash == collection) else {
            return;
        };
        match step {
            RetrievalStep::Query(k) => {
                self.attempts += 1;
                if let Slot::Fetching(_, a) = &mut job.slots[idx] {
                    *a = self.attempts;
                }
                if let Some(n) = ctx.dir.node_of(&k) {
                    ctx.send(n, Msg::CollectionRequest(collection));
                }
                ctx.timer(ctx.dir.retrieval_timeout, TimerKind::Retrieval { collection, attempt: self.attempts });
            }
            RetrievalStep::Recovered(texts) => {
                self.texts.insert(collection, texts.clone());
                job.slots[idx] = Slot::Ready(Some(texts));
            }
            RetrievalStep::Exhausted => {
                let g = job.block.proto.guaranteed_collections[idx].clone();
                let mcc = MissingCollectionChallenge::sign(g, job.block.proto.hash(), &self.kp);
                ctx.log("mcc_raised", collection, json!({ "height": job.block.proto.height }));
                ctx.broadcast(&ctx.dir.consensus.clone(), Msg::Challenge(ChallengeEnvelope::MissingCollection(mcc)));
                job.slots[idx] = Slot::Challenged;
            }
        }
    }

    fn progress(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            if self.job.is_none() {
                let Some(b) = self.blocks.get(&(self.exec_height + 1)).cloned() else { return };
                let n = b.proto.guaranteed_collections.len();
                self.job = Some(Job { block: b.clone(), slots: (0..n).map(|_| Slot::Challenged).collect() });
                for (i, g) in b.proto.guaranteed_collections.iter().enumerate() {
                    let slot = match self.texts.get(&g.collection_hash) {
                        Some(t) => Slot::Ready(Some(t.clone())),
                        None => {
                            let mut r = Retrieval::new(g.clone());
                            let step = r.advance();
                            self.job.as_mut().expect("just set").slots[i] = Slot::Fetching(Box::new(r), 0);
                            self.on_step(ctx, g.collection_hash, step);
                            continue;
                        }
                    };
                    self.job.as_mut().expect("just set").slots[i] = slot;
                }
            }
            let attested: HashSet<Digest> = attested_missing(&self.pstate).iter().map(|a| a.collection_hash).collect();
            let job = self.job.as_mut().expect("job present");
            for (slot, g) in job.slots.iter_mut().zip(&job.block.proto.guaranteed_collections) {
                if matches!(slot, Slot::Ready(_)) {
                    continue;
                }
                if let Some(t) = self.texts.get(&g.collection_hash) {
                    *slot = Slot::Ready(Some(t.clone()));
                } else if matches!(slot, Slot::Challenged) && attested.contains(&g.collection_hash) {
                    *slot = Slot::Ready(None);
                }
            }
            if !job.slots.iter().all(|s| matches!(s, Slot::Ready(_))) {
                return;
            }
            let job = self.job.take().expect("job present");
            self.execute(ctx, job);
        }
    }

    fn execute(&mut self, ctx: &mut Ctx<'_>, job: Job) {
        let collections = job
            .slots
            .into_iter()
            .map(|s| match s {
                Slot::Ready(x) => x,
                _ => unreachable!("all slots ready"),
            })
            .collect();
        let inputs = BlockInputs { collections };
        let txs = inputs.transactions();
        let proto = &job.block.proto;
        let be = block_execution(
            proto.hash(),
            self.prev_result,
            self.exec_state.clone(),
            &txs,
            ctx.dir.chunk_budget,
            &self.kp,
            self.fault,
        );
        let receipt = be.receipt.clone();
        let rh = receipt.result.hash();
        let faulty = be.events.iter().any(|e| matches!(e, ExecutionEvent::FaultInjected { .. }));
        let n = be.chunk_start_states.len();
        let packs = (0..n)
            .map(|i| {
                let end = be.chunk_start_states.get(i + 1).unwrap_or(&be.final_state);
                SignedDataPack::sign(&receipt, ChunkDataPack::build(i, &be.chunk_start_states[i], end), &self.kp)
            })
            .collect();
        let me = self.kp.public();
        if faulty {
            ctx.obs.faulty_results.insert(rh);
            ctx.obs.faulty_executors.insert(me);
            ctx.log("fault_injected", rh, json!({ "height": proto.height }));
        }
        ctx.obs.receipts.entry(me).or_default().insert(rh, receipt.clone());
        ctx.obs.exec_tips.insert(me, rh);
        ctx.log("receipt", rh, json!({ "height": proto.height, "chunks": n, "transactions": txs.len() }));
        ctx.broadcast(&ctx.dir.consensus.clone(), Msg::Receipt(receipt.clone()));
        let bundle = Arc::new(ExecutionBundle { receipt, inputs, packs });
        ctx.broadcast(&ctx.dir.verifiers.clone(), Msg::Bundle(bundle.clone()));
        self.unsealed.insert(proto.height, (ctx.now, bundle));
        self.exec_state = be.final_state;
        self.prev_result = rh;
        self.exec_height += 1;
    }
}

/// Verifier: checks its assigned chunks of every receipt it is sent.
pub struct VerifierNode {
    pub kp: StakingKeyPair,
    by_hash: HashMap<Digest, Arc<Block>>,
    pending: BTreeMap<u64, Arc<Block>>,
    pstate: ProtocolState,
    state_height: u64,
    bundles: Vec<Arc<ExecutionBundle>>,
    /// Verdicts sent per receipt, repeated if the executor sends it again.
    done: HashMap<Digest, Vec<Msg>>,
}

impl VerifierNode {
    pub fn new(kp: StakingKeyPair, genesis_state: ProtocolState) -> Self {
        Self {
            kp,
            by_hash: HashMap::new(),
            pending: BTreeMap::new(),
            pstate: genesis_state,
            state_height: 0,
            bundles: Vec::new(),
            done: HashMap::new(),
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Msg) {
        match msg {
            Msg::FinalBlock(b) => {
                let h = b.proto.hash();
                if self.by_hash.contains_key(&h) || !verify_block(ctx, &b) {
                    return;
                }
                let gaps = missing_below(self.state_height + 1, b.proto.height, |x| self.pending.contains_key(&x));
                if !gaps.is_empty() {
                    ctx.send(from, Msg::BlockRequest(gaps));
                }
                self.by_hash.insert(h, b.clone());
                self.pending.insert(b.proto.height, b);
                while let Some(b) = self.pending.remove(&(self.state_height + 1)) {
                    for u in &b.proto.state_updates {
                        let _ = self.pstate.apply_update(u);
                    }
                    self.state_height += 1;
                }
            }
            Msg::Bundle(b) => {
                let rh = b.receipt.hash();
                if let Some(sent) = self.done.get(&rh) {
                    for m in sent {
                        ctx.broadcast(&ctx.dir.consensus.clone(), m.clone());
                    }
                    return;
                }
                if self.bundles.iter().any(|x| x.receipt.hash() == rh) || !b.receipt.verify_signature() {
                    return;
                }
                self.bundles.push(b);
            }
            _ => return,
        }
        self.try_bundles(ctx);
    }

    fn try_bundles(&mut self, ctx: &mut Ctx<'_>) {
        let attested: HashSet<Digest> = attested_missing(&self.pstate).iter().map(|a| a.collection_hash).collect();
        let bundles = std::mem::take(&mut self.bundles);
        for b in bundles {
            let Some(block) = self.by_hash.get(&b.receipt.result.block_hash).cloned() else {
                self.bundles.push(b);
                continue;
            };
            if !b.inputs.matches(&block.proto.guaranteed_collections, &attested) {
                self.bundles.push(b);
                continue;
            }
            let sigma = block.randomness();
            let assigned = assign_chunks(self.kp.public(), &sigma, b.receipt.result.chunks.len(), ctx.dir.coverage);
            let mut sent = Vec::new();
            for c in assigned.chunks {
                let Some(pack) = b.packs.get(c as usize).filter(|p| p.pack.chunk_index == c as usize) else { continue };
                let m = match verify_chunk(&self.kp, &b.receipt, &b.inputs, pack, ctx.dir.chunk_budget) {
                    ChunkVerdict::Approve(a) => Msg::Approval(a),
                    ChunkVerdict::Challenge(f) => {
                        let executor = ctx.dir.node_of(&b.receipt.executor).map(|n| ctx.dir.names[n].clone());
                        ctx.log("fcc_raised", b.receipt.result.hash(), json!({ "chunk": c, "executor": executor }));
                        Msg::Challenge(ChallengeEnvelope::FaultyComputation(f))
                    }
                };
                ctx.broadcast(&ctx.dir.consensus.clone(), m.clone());
                sent.push(m);
            }
            self.done.insert(b.receipt.hash(), sent);
        }
    }
}

/// Workload generator. Holds no stake.
pub struct ClientNode {
    pub kp: StakingKeyPair,
    stream: SeededStream,
    counter: u64,
    heights: BTreeMap<u64, Digest>,
    interval: u64,
    until: u64,
    cost_max: u64,
    key_space: u64,
}

impl ClientNode {
    pub fn new(kp: StakingKeyPair, stream: SeededStream, genesis: Digest, interval: u64, until: u64, cost_max: u64, key_space: u64) -> Self {
        Self { kp, stream, counter: 0, heights: [(0, genesis)].into(), interval, until, cost_max, key_space }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        let first = 1 + self.stream.next_below(self.interval);
        ctx.timer(first, TimerKind::ClientTick);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, t: TimerKind) {
        if t != TimerKind::ClientTick || ctx.now >= self.until {
            return;
        }
        self.counter += 1;
        let key = self.stream.next_below(self.key_space).to_be_bytes().to_vec();
        let cost = 1 + self.stream.next_below(self.cost_max) as u32;
        let script = Script::new(vec![ScriptOp { op: Op::SetRegister { key, value: self.counter.to_be_bytes().to_vec() }, cost }]);
        // a couple of blocks behind the tip, so collectors already know it
        let top = self.heights.keys().next_back().copied().unwrap_or(0);
        let reference = self.heights.range(..=top.saturating_sub(2)).next_back().map(|(_, h)| *h).expect("genesis present");
        let tx = SignedTransaction::sign(&script, reference, &self.kp, &[&self.kp]);
        let h = tx.hash();
        let cluster = route_transaction(&h, ctx.dir.clusters.len());
        let members = &ctx.dir.clusters[cluster];
        let to = members[self.stream.next_below(members.len() as u64) as usize];
        ctx.obs.tx_submitted.insert(h, ctx.now);
        ctx.obs.submitted_count += 1;
        ctx.send(to, Msg::SubmitTx(tx));
        ctx.timer(self.interval, TimerKind::ClientTick);
    }

    pub fn on_message(&mut self, _ctx: &mut Ctx<'_>, _from: NodeId, msg: Msg) {
        if let Msg::FinalBlock(b) = msg {
            self.heights.insert(b.proto.height, b.proto.hash());
        }
    }
}

pub enum Node {
    Consensus(Box<ConsensusNode>),
    Collector(Box<CollectorNode>),
    Executor(Box<ExecutorNode>),
    Verifier(Box<VerifierNode>),
    Client(Box<ClientNode>),
}

impl Node {
    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        match self {
            Node::Consensus(n) => n.start(ctx),
            Node::Collector(n) => n.start(ctx),
            Node::Client(n) => n.start(ctx),
            Node::Executor(n) => n.start(ctx),
            Node::Verifier(_) => {}
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Msg) {
        match self {
            Node::Consensus(n) => n.on_message(ctx, from, msg),
            Node::Collector(n) => n.on_message(ctx, from, msg),
            Node::Executor(n) => n.on_message(ctx, from, msg),
            Node::Verifier(n) => n.on_message(ctx, from, msg),
            Node::Client(n) => n.on_message(ctx, from, msg),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, t: TimerKind) {
        match self {
            Node::Consensus(n) => n.on_timer(ctx, t),
            Node::Collector(n) => n.on_timer(ctx, t),
            Node::Executor(n) => n.on_timer(ctx, t),
            Node::Client(n) => n.on_timer(ctx, t),
            Node::Verifier(_) => {}
        }
    }
}

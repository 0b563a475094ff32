// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulation of the whole pipeline.
//!
//! One seeded run is a pure function of the [`Scenario`]: the event loop is
//! single threaded, same-tick events are ordered by scheduling sequence, and
//! every random draw comes from streams derived from the run seed.

mod log;
mod net;
mod node;
mod report;

use std::collections::HashMap;

use serde_json::json;

pub use log::{EventLog, LogRecord, Metrics, LATENCY_EDGES};
pub use net::{NetModel, NodeId, Scheduler};
pub use node::{Directory, ExecutionBundle, Msg, Observations, TimerKind};
pub use report::{Property, Report};

use crate::block::{drb_committee, genesis_randomness, ChainApp, FormationParams, ProtoBlock};
use crate::clustering::cluster_assignment;
use crate::collection::{collection_hash, ClusterPayload, CollectorApp, GuaranteeAggregator, GuaranteeVote};
use crate::crypto::{derive_seed, dkg_setup, hash, GroupParams, Seed, SeededStream, StakingKeyPair, ThresholdParams};
use crate::execution::FaultInjection;
use crate::hotstuff::{Engine, EngineConfig};
use crate::scenario::{AdversarySpec, GroupChoice, Scenario, ScenarioError};
use crate::state::{meets_supermajority, Committee, Epoch, NodeIdentity, ProtocolState, Role};
use crate::transaction::{Op, Script, ScriptOp, SignedTransaction};
use node::{ClientNode, CollectorNode, ConsensusNode, Ctx, ExecutorNode, Node, Out, VerifierNode};

pub const CONSENSUS_DOMAIN: &[u8] = b"flowpipe/consensus";

enum Event {
    Start,
    Deliver(NodeId, Msg),
    Timer(TimerKind),
    /// Index into the adversary list.
    Withhold(usize, u32),
}

/// Everything a run produces.
pub struct SimOutput {
    pub log: EventLog,
    pub metrics: Metrics,
    pub report: Report,
}

pub struct World {
    scenario: Scenario,
    dir: Directory,
    nodes: Vec<Node>,
    sched: Scheduler<Event>,
    net: NetModel,
    skew: Vec<f64>,
    behaviors: Vec<Vec<AdversarySpec>>,
    obs: Observations,
    log: EventLog,
    now: u64,
    sent: u64,
    dropped: u64,
}

fn seed_of(run_seed: u64, tags: &[&str]) -> Seed {
    derive_seed(tags, &run_seed.to_be_bytes()).expect("non-empty tags")
}

fn node_key(seed: u64, name: &str) -> StakingKeyPair {
    StakingKeyPair::from_seed(format!("flowpipe-node/{seed}/{name}").as_bytes())
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let s = &scenario;
        let seed = s.run.seed;
        let names = s.node_names();
        let kps: Vec<StakingKeyPair> = names.iter().map(|n| node_key(seed, n)).collect();
        let keys: Vec<_> = kps.iter().map(|k| k.public()).collect();
        let by_key: HashMap<_, _> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

        let r = &s.roles;
        let mut ids = 0..names.len();
        let mut take = |n: usize| -> Vec<NodeId> { ids.by_ref().take(n).collect() };
        let consensus = take(r.consensus.count);
        let collectors = take(r.collectors.count);
        let executors = take(r.executors.count);
        let verifiers = take(r.verifiers.count);
        let clients = take(r.clients);

        let mut identities = Vec::new();
        for (group, role, stake) in [
            (&consensus, Role::Consensus, r.consensus.stake),
            (&collectors, Role::Collector, r.collectors.stake),
            (&executors, Role::Execution, r.executors.stake),
            (&verifiers, Role::Verification, r.verifiers.stake),
        ] {
            for &n in group {
                identities.push(NodeIdentity::genesis(keys[n], role, stake, n as u32));
            }
        }
        let epoch = Epoch::new(0, 0, 1_000_000, 500_000).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let state = ProtocolState::genesis(epoch, identities).map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let genesis_proto = ProtoBlock::genesis(&state).hash();
        let rand = genesis_randomness();
        let collector_keys: Vec<_> = collectors.iter().map(|&n| keys[n]).collect();
        let assignment = cluster_assignment(&collector_keys, s.clusters.count, rand.as_bytes(), 0)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let clusters: Vec<Vec<NodeId>> =
            assignment.members.iter().map(|m| m.iter().map(|k| by_key[k]).collect()).collect();
        let cluster_committees: Vec<Committee> = assignment
            .members
            .iter()
            .map(|m| Committee::new(m.iter().map(|k| (*k, r.collectors.stake)).collect()))
            .collect();

        let consensus_committee = state.committee(Role::Consensus);
        let drb_keys = drb_committee(&consensus_committee, s.drb.n_s);
        let drb: Vec<NodeId> = drb_keys.iter().map(|k| by_key[k]).collect();
        let group = match s.drb.group {
            GroupChoice::Tiny => GroupParams::tiny(),
            GroupChoice::Large => GroupParams::large(),
        };
        let threshold = ThresholdParams::new(drb.len(), group).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let entropy: Vec<Seed> = (0..drb.len()).map(|i| seed_of(seed, &["flowpipe-dkg", &i.to_string()])).collect();
        let dkg = dkg_setup(&threshold, &entropy).map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let genesis_result = hash(b"genesis-result", b"");
        let params = FormationParams {
            hs_domain: CONSENSUS_DOMAIN.to_vec(),
            clusters: cluster_committees.clone(),
            chunk_budget: s.execution.chunk_budget,
            coverage: s.verification.coverage,
            mcc_deadline_blocks: s.verification.mcc_deadline_blocks,
            slash_policy: s.verification.slash_policy,
            max_collections_per_block: s.consensus.max_collections_per_block,
            max_seals_per_block: s.consensus.max_seals_per_block,
            genesis_result,
        };
        let engine_cfg = |domain: Vec<u8>, committee: Committee| EngineConfig {
            domain,
            committee,
            leader_seed: rand.as_bytes().to_vec(),
            base_timeout: s.consensus.base_timeout,
            proposal_delay: s.consensus.proposal_delay,
            max_doublings: s.consensus.max_doublings,
        };

        let mut nodes = Vec::with_capacity(names.len());
        for (i, kp) in kps.iter().enumerate() {
            let node = if consensus.contains(&i) {
                let app = ChainApp::new(params.clone(), kp.public(), state.clone());
                let engine = Engine::new(engine_cfg(CONSENSUS_DOMAIN.to_vec(), consensus_committee.clone()), kp.clone(), app.genesis_proto());
                let share = drb.iter().position(|&d| d == i).map(|j| dkg.shares[j].clone());
                Node::Consensus(Box::new(ConsensusNode::new(kp.clone(), engine, app, share)))
            } else if collectors.contains(&i) {
                let c = assignment.cluster_of(kp.public()).expect("every collector is assigned");
                let committee = cluster_committees[c].clone();
                let domain = format!("flowpipe/cluster/{c}").into_bytes();
                let engine = Engine::new(engine_cfg(domain, committee.clone()), kp.clone(), ClusterPayload::Noop);
                let app = CollectorApp::new(c as u32, committee, s.clusters.collection_threshold, s.clusters.collection_timespan);
                Node::Collector(Box::new(CollectorNode::new(kp.clone(), c, engine, app, genesis_proto)))
            } else if executors.contains(&i) {
                Node::Executor(Box::new(ExecutorNode::new(kp.clone(), state.clone(), genesis_result)))
            } else if verifiers.contains(&i) {
                Node::Verifier(Box::new(VerifierNode::new(kp.clone(), state.clone())))
            } else {
                let stream = SeededStream::new(seed_of(seed, &["flowpipe-client", &names[i]]));
                let e = &s.execution;
                Node::Client(Box::new(ClientNode::new(
                    kp.clone(),
                    stream,
                    genesis_proto,
                    e.tx_interval,
                    e.tx_until.unwrap_or(u64::MAX),
                    e.tx_cost_max,
                    e.tx_key_space,
                )))
            };
            nodes.push(node);
        }

        let mut behaviors = vec![Vec::new(); names.len()];
        for b in &s.adversary {
            if let Some(n) = b.node() {
                let i = names.iter().position(|x| x == n).ok_or_else(|| ScenarioError::Invalid(format!("unknown node {n}")))?;
                behaviors[i].push(b.clone());
            }
        }
        let reference = consensus.iter().copied().find(|&n| behaviors[n].is_empty()).unwrap_or(consensus[0]);

        let mut skew_stream = SeededStream::new(seed_of(seed, &["flowpipe-skew"]));
        let skew = (0..names.len()).map(|_| 1.0 + skew_stream.next_unit() * (s.network.phi_t - 1.0)).collect();
        let net = NetModel::new(&s.network, &names, SeededStream::new(seed_of(seed, &["flowpipe-net"])));

        let dir = Directory {
            names,
            keys,
            by_key,
            consensus,
            collectors,
            executors,
            verifiers,
            clients,
            drb,
            clusters,
            cluster_committees,
            threshold,
            vv: dkg.verification,
            genesis_proto,
            chunk_budget: s.execution.chunk_budget,
            coverage: s.verification.coverage,
            tx_window: s.execution.tx_window,
            retrieval_timeout: s.execution.retrieval_timeout,
        };

        let mut sched = Scheduler::default();
        for i in 0..nodes.len() {
            sched.push(0, i, Event::Start);
        }
        for (k, b) in s.adversary.iter().enumerate() {
            if let AdversarySpec::WithholdCollection { start, .. } = b {
                sched.push(*start, 0, Event::Withhold(k, 0));
            }
        }

        let obs = Observations { reference, ..Observations::default() };
        Ok(Self {
            scenario,
            dir,
            nodes,
            sched,
            net,
            skew,
            behaviors,
            obs,
            log: EventLog::default(),
            now: 0,
            sent: 0,
            dropped: 0,
        })
    }

    pub fn directory(&self) -> &Directory {
        &self.dir
    }

    fn active(&self, node: NodeId, t: u64, pred: impl Fn(&AdversarySpec) -> bool) -> Option<&AdversarySpec> {
        self.behaviors[node].iter().find(|b| pred(b) && b.active_at(t))
    }

    /// Runs to `max_sim_time` or until nothing is left to do.
    pub fn run(mut self) -> SimOutput {
        let end = self.scenario.run.max_sim_time;
        while let Some(t) = self.sched.peek_time() {
            if t > end {
                break;
            }
            let (t, node, ev) = self.sched.pop().expect("peeked");
            self.now = t;
            self.step(node, ev);
        }
        self.finish()
    }

    fn step(&mut self, me: NodeId, ev: Event) {
        let now = self.now;
        let silent = self.active(me, now, |b| matches!(b, AdversarySpec::NonResponsive { .. })).is_some();
        if silent && matches!(ev, Event::Deliver(..)) {
            return;
        }
        if let Event::Withhold(k, round) = ev {
            self.withhold(k, round);
            return;
        }
        let equivocate = self.active(me, now, |b| matches!(b, AdversarySpec::EquivocateProposal { .. })).is_some();
        let stale = self.active(me, now, |b| matches!(b, AdversarySpec::StaleVote { .. })).is_some();
        let fault = self.active(me, now, |b| matches!(b, AdversarySpec::FaultyExecution { .. })).map(|b| match b {
            AdversarySpec::FaultyExecution { chunk, .. } => FaultInjection { chunk: *chunk },
            _ => unreachable!(),
        });
        match &mut self.nodes[me] {
            Node::Consensus(n) => {
                n.engine.equivocate = equivocate;
                n.engine.ignore_safety = stale;
            }
            Node::Executor(n) => n.fault = fault,
            _ => {}
        }
        let mut ctx = Ctx { now, me, dir: &self.dir, obs: &mut self.obs, out: Vec::new() };
        let node = &mut self.nodes[me];
        match ev {
            Event::Start => node.start(&mut ctx),
            Event::Deliver(from, msg) => node.on_message(&mut ctx, from, msg),
            Event::Timer(t) => node.on_timer(&mut ctx, t),
            Event::Withhold(..) => unreachable!(),
        }
        let out = ctx.out;
        self.apply(me, out, silent);
    }

    fn apply(&mut self, me: NodeId, out: Vec<Out>, silent: bool) {
        let now = self.now;
        for o in out {
            match o {
                Out::Send(to, msg) => {
                    if silent {
                        continue;
                    }
                    self.sent += 1;
                    match self.net.delay(me, to, now) {
                        Some(d) => self.sched.push(now + d, to, Event::Deliver(me, msg)),
                        None => self.dropped += 1,
                    }
                }
                Out::Timer(after, kind) => {
                    let dilated = (after as f64 * self.skew[me]).ceil() as u64;
                    self.sched.push(now + dilated.max(1), me, Event::Timer(kind));
                }
                Out::Log(kind, digest, detail) => self.log.push(now, &self.dir.names[me], kind, &digest, detail),
            }
        }
    }

    /// Colluding guarantors of one cluster sign a collection only they know
    /// and send the guarantee to consensus.
    fn withhold(&mut self, k: usize, round: u32) {
        let AdversarySpec::WithholdCollection { cluster, count, interval, .. } = self.scenario.adversary[k].clone() else {
            return;
        };
        let Some(members) = self.dir.clusters.get(cluster) else { return };
        let mut members = members.clone();
        members.sort_by_key(|&n| self.dir.keys[n]);
        let committee = &self.dir.cluster_committees[cluster];
        let mut colluders = Vec::new();
        for &n in &members {
            colluders.push(n);
            let stake: u128 = colluders.iter().map(|&c| committee.stake_of(self.dir.keys[c]).unwrap_or(0) as u128).sum();
            if meets_supermajority(num_rational::Ratio::new(stake, committee.total_stake())) {
                break;
            }
        }
        let payer = StakingKeyPair::from_seed(format!("flowpipe-withhold/{}/{k}/{round}", self.scenario.run.seed).as_bytes());
        let txs: Vec<SignedTransaction> = (0..3u8)
            .map(|j| {
                let op = Op::SetRegister { key: vec![0xee, j], value: vec![round as u8] };
                SignedTransaction::sign(&Script::new(vec![ScriptOp { op, cost: 1 }]), self.dir.genesis_proto, &payer, &[&payer])
            })
            .collect();
        let h = collection_hash(&txs.iter().map(|t| t.hash()).collect::<Vec<_>>());
        let mut agg = GuaranteeAggregator::default();
        let mut guarantee = None;
        for &n in &colluders {
            let Node::Collector(c) = &mut self.nodes[n] else { continue };
            c.withheld.insert(h);
            guarantee = agg.add(&GuaranteeVote::sign(h, cluster as u32, &c.kp), committee).or(guarantee);
        }
        let Some(g) = guarantee else { return };
        let lead = colluders[0];
        let names: Vec<&str> = colluders.iter().map(|&n| self.dir.names[n].as_str()).collect();
        self.log.push(self.now, &self.dir.names[lead], "withhold_collection", &h, json!({ "cluster": cluster, "colluders": names }));
        self.obs.withheld.push(g.clone());
        let out = self.dir.consensus.iter().map(|&n| Out::Send(n, Msg::Guarantee(g.clone()))).collect();
        self.apply(lead, out, false);
        if round + 1 < count {
            self.sched.push(self.now + interval, 0, Event::Withhold(k, round + 1));
        }
    }

    fn finish(self) -> SimOutput {
        let reference = self.obs.reference;
        let Node::Consensus(refnode) = &self.nodes[reference] else { unreachable!("reference is a consensus node") };
        let final_state = refnode.app.finalized().state.clone();
        let report = Report::evaluate(&self.scenario, &self.dir, &self.obs, &final_state, self.now);
        let metrics = Metrics::collect(&self.obs, &final_state, self.now, self.sent, self.dropped);
        SimOutput { log: self.log, metrics, report }
    }
}

/// Builds and runs `scenario`.
pub fn run(scenario: Scenario) -> Result<SimOutput, ScenarioError> {
    Ok(World::new(scenario)?.run())
}

// SPDX-License-Identifier: Apache-2.0

//! Run properties evaluated after the event loop stops.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::log::Metrics;
use super::node::{Directory, Observations};
use crate::block::attested_missing;
use crate::crypto::{Digest, StakingKey};
use crate::execution::trace_fault_origin;
use crate::scenario::{AdversarySpec, Scenario};
use crate::state::{ChallengeKind, ChallengeStatus, Change, ProtocolState, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Property {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub properties: Vec<Property>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.properties.push(Property { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn evaluate(s: &Scenario, dir: &Directory, obs: &Observations, state: &ProtocolState, now: u64) -> Self {
        let mut r = Report { scenario: s.name.clone(), seed: s.run.seed, properties: Vec::new() };
        let chain = &obs.chain;

        let mut conflicts = 0;
        let chains: Vec<&Vec<Digest>> = obs.finalized.values().collect();
        for (i, a) in chains.iter().enumerate() {
            for b in &chains[i + 1..] {
                conflicts += a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
            }
        }
        r.check(
            "safety",
            conflicts == 0 && obs.safety_violations == 0,
            format!("{conflicts} conflicting heights, {} local violations", obs.safety_violations),
        );

        let height = chain.len() as u64;
        r.check("liveness", height >= s.expect.min_finalized, format!("finalized {height}, need {}", s.expect.min_finalized));

        let sealed = sealed_height(chain);
        r.check("sealing", sealed >= s.expect.min_sealed, format!("sealed {sealed}, need {}", s.expect.min_sealed));

        let faulty_seals = chain.iter().flat_map(|b| &b.seals).filter(|x| obs.faulty_results.contains(&x.result_hash)).count();
        r.check("no_faulty_seal", faulty_seals == 0, format!("{faulty_seals} faulty results sealed"));

        let slashed = slashed_keys(chain);
        let slashes = slashed.values().filter(|a| **a > 0).count() as u64;
        r.check("slashes", slashes >= s.expect.min_slashes, format!("{slashes} keys slashed, need {}", s.expect.min_slashes));

        if s.adversary.iter().any(|a| matches!(a, AdversarySpec::FaultyExecution { .. })) {
            let mut missed = Vec::new();
            for exec in &obs.faulty_executors {
                let receipts = &obs.receipts[exec];
                let tip = &receipts[&obs.exec_tips[exec]];
                let origin = trace_fault_origin(tip, |h| receipts.get(h), |x| obs.faulty_results.contains(&x.result.hash()));
                let ok = origin.as_ref() == Ok(exec) && slashed.get(exec).is_some_and(|a| *a > 0);
                if !ok {
                    missed.push(name(dir, exec));
                }
            }
            r.check(
                "fault_origin_slashed",
                missed.is_empty(),
                format!("{} faulty executors, unslashed: {missed:?}", obs.faulty_executors.len()),
            );
        }

        if !obs.withheld.is_empty() {
            let attested: BTreeSet<Digest> = attested_missing(state).iter().map(|a| a.collection_hash).collect();
            let mut problems = Vec::new();
            for g in &obs.withheld {
                let h = g.collection_hash;
                let Some(included) = chain.iter().find(|b| b.guaranteed_collections.iter().any(|x| x.collection_hash == h)) else {
                    problems.push(format!("{} never included", h.short()));
                    continue;
                };
                let mccs: Vec<_> = state
                    .challenges
                    .values()
                    .filter(|c| c.challenge.kind == ChallengeKind::MissingCollection && c.challenge.evidence.first() == Some(&h))
                    .collect();
                if mccs.len() != 1 {
                    problems.push(format!("{} has {} challenges", h.short(), mccs.len()));
                    continue;
                }
                if mccs[0].status != ChallengeStatus::Resolved(Verdict::AccusedAtFault) {
                    problems.push(format!("{} challenge {:?}", h.short(), mccs[0].status));
                    continue;
                }
                let unslashed: Vec<_> = g.guarantors().iter().filter(|k| slashed.get(k).is_none_or(|a| *a == 0)).map(|k| name(dir, k)).collect();
                if !unslashed.is_empty() {
                    problems.push(format!("{} guarantors not slashed: {unslashed:?}", h.short()));
                }
                if !attested.contains(&h) {
                    problems.push(format!("{} has no attestation", h.short()));
                }
                if s.expect.seal_after_withheld && sealed <= included.height {
                    problems.push(format!("nothing sealed past height {}", included.height));
                }
            }
            r.check("withheld_collections", problems.is_empty(), if problems.is_empty() { format!("{} handled", obs.withheld.len()) } else { problems.join("; ") });
        }

        for (i, p) in s.network.partitions.iter().enumerate() {
            if p.start >= now {
                continue;
            }
            let before = obs.proposals.iter().filter(|(t, _)| *t < p.start).map(|(_, h)| *h).max().unwrap_or(0);
            let during = obs.finalize_events.iter().filter(|(t, _, h)| *t >= p.start && *t < p.end && *h > before).count();
            r.check(
                &format!("partition_{i}_no_progress"),
                during == 0,
                format!("{during} finalizations above height {before} while partitioned"),
            );
        }

        if s.expect.min_equivocation_slashes > 0 {
            let n = state
                .challenges
                .values()
                .filter(|c| {
                    c.challenge.kind == ChallengeKind::ProtocolViolation && c.status == ChallengeStatus::Resolved(Verdict::AccusedAtFault)
                })
                .count() as u64;
            r.check(
                "equivocation_slashed",
                n >= s.expect.min_equivocation_slashes,
                format!("{n} upheld equivocation challenges, need {}", s.expect.min_equivocation_slashes),
            );
        }
        r
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} seed {}", self.scenario, self.seed)?;
        for p in &self.properties {
            writeln!(f, "  {:<4} {:<24} {}", if p.pass { "ok" } else { "FAIL" }, p.name, p.detail)?;
        }
        Ok(())
    }
}

fn name(dir: &Directory, k: &StakingKey) -> String {
    dir.node_of(k).map(|n| dir.names[n].clone()).unwrap_or_else(|| format!("{k:?}"))
}

fn sealed_height(chain: &[std::sync::Arc<crate::block::ProtoBlock>]) -> u64 {
    chain.iter().flat_map(|b| &b.seals).map(|s| s.height).max().unwrap_or(0)
}

fn slashed_keys(chain: &[std::sync::Arc<crate::block::ProtoBlock>]) -> BTreeMap<StakingKey, u64> {
    let mut out = BTreeMap::new();
    for b in chain {
        for u in &b.state_updates {
            for c in &u.changes {
                if let Change::Slash { key, amount } = c {
                    *out.entry(*key).or_default() += amount;
                }
            }
        }
    }
    out
}

impl Metrics {
    pub(crate) fn collect(obs: &Observations, state: &ProtocolState, now: u64, sent: u64, dropped: u64) -> Self {
        let chain = &obs.chain;
        let slashed = slashed_keys(chain);
        let mut m = Metrics {
            sim_time: now,
            blocks_finalized: chain.len() as u64,
            blocks_sealed: sealed_height(chain),
            collections_guaranteed: chain.iter().map(|b| b.guaranteed_collections.len() as u64).sum(),
            challenges: state.challenges.len() as u64,
            slashes: slashed.values().filter(|a| **a > 0).count() as u64,
            stake_slashed: slashed.values().sum(),
            messages_sent: sent,
            messages_dropped: dropped,
            transactions_submitted: obs.submitted_count,
            ..Metrics::default()
        };
        m.record_latencies(&obs.latencies);
        m
    }
}

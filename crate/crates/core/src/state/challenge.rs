// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{Change, ProtocolState, StateError, StateUpdate, UpdateCause};
use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, Digest, StakingKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeKind {
    MissingCollection,
    FaultyComputation,
    ProtocolViolation,
}

impl ChallengeKind {
    fn code(self) -> u8 {
        match self {
            ChallengeKind::MissingCollection => 0,
            ChallengeKind::FaultyComputation => 1,
            ChallengeKind::ProtocolViolation => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlashingChallenge {
    pub kind: ChallengeKind,
    pub challenger: StakingKey,
    pub accused: Vec<StakingKey>,
    pub evidence: Vec<Digest>,
    /// Simulated time after which silence counts against the accused.
    pub deadline: u64,
    /// The evidence alone settles the case; no response is awaited.
    pub full_proof: bool,
}

impl SlashingChallenge {
    pub fn id(&self) -> Digest {
        hash(b"challenge", &self.canonical_bytes())
    }
}

impl Canonical for SlashingChallenge {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.kind.code()).u64(self.challenger.0);
        enc.len_prefix(self.accused.len());
        for k in &self.accused {
            enc.u64(k.0);
        }
        self.evidence.encode(enc);
        enc.u64(self.deadline).u8(self.full_proof as u8);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AccusedAtFault,
    ChallengerAtFault,
    /// The accused produced what was asked for; nobody is slashed.
    NoFault,
}

impl Verdict {
    pub(crate) fn code(self) -> u8 {
        match self {
            Verdict::AccusedAtFault => 0,
            Verdict::ChallengerAtFault => 1,
            Verdict::NoFault => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengeStatus {
    Pending,
    Resolved(Verdict),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeRecord {
    pub challenge: SlashingChallenge,
    pub status: ChallengeStatus,
}

impl Canonical for ChallengeRecord {
    fn encode(&self, enc: &mut Encoder) {
        self.challenge.encode(enc);
        match self.status {
            ChallengeStatus::Pending => enc.u8(0),
            ChallengeStatus::Resolved(v) => enc.u8(1).u8(v.code()),
        };
    }
}

/// Slash fractions in basis points of the offender's slashable stake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlashPolicy {
    pub faulty_execution_bps: u32,
    pub false_challenge_bps: u32,
    pub missing_collection_bps: u32,
    pub protocol_violation_bps: u32,
}

impl Default for SlashPolicy {
    fn default() -> Self {
        Self {
            faulty_execution_bps: 10_000,
            false_challenge_bps: 10_000,
            missing_collection_bps: 500,
            protocol_violation_bps: 10_000,
        }
    }
}

impl SlashPolicy {
    fn accused_bps(&self, kind: ChallengeKind) -> u32 {
        match kind {
            ChallengeKind::MissingCollection => self.missing_collection_bps,
            ChallengeKind::FaultyComputation => self.faulty_execution_bps,
            ChallengeKind::ProtocolViolation => self.protocol_violation_bps,
        }
    }

    pub fn amount(bps: u32, slashable: u64) -> u64 {
        ((slashable as u128 * bps.min(10_000) as u128) / 10_000) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Adjudication {
    pub challenge_id: Digest,
    /// `None` while the challenge is still waiting for a response.
    pub verdict: Option<Verdict>,
    pub slashed: Vec<(StakingKey, u64)>,
}

/// Settles a recorded challenge.
///
/// Full-proof challenges are decided at once: `response` carries the
/// adjudicator's evaluation of the proof and, if absent, the proof stands.
/// Other challenges take the verdict from `response`, fall to the accused once
/// `timed_out`, and otherwise stay pending with an empty update.
pub fn adjudicate_challenge(
    state: &ProtocolState,
    id: &Digest,
    response: Option<Verdict>,
    timed_out: bool,
    policy: &SlashPolicy,
) -> Result<(Adjudication, StateUpdate), StateError> {
    let rec = state.challenges.get(id).ok_or(StateError::UnknownChallenge(*id))?;
    if rec.status != super::ChallengeStatus::Pending {
        return Err(StateError::ChallengeClosed(*id));
    }
    let c = &rec.challenge;
    let verdict = if c.full_proof {
        Some(response.unwrap_or(Verdict::AccusedAtFault))
    } else if response.is_some() {
        response
    } else if timed_out {
        Some(Verdict::AccusedAtFault)
    } else {
        None
    };
    let Some(verdict) = verdict else {
        return Ok((
            Adjudication { challenge_id: *id, verdict: None, slashed: vec![] },
            StateUpdate::new(UpdateCause::Adjudication, vec![]),
        ));
    };
    let (targets, bps): (Vec<StakingKey>, u32) = match verdict {
        Verdict::AccusedAtFault => (c.accused.clone(), policy.accused_bps(c.kind)),
        Verdict::ChallengerAtFault => (vec![c.challenger], policy.false_challenge_bps),
        Verdict::NoFault => (vec![], 0),
    };
    let mut slashed = Vec::new();
    let mut changes = Vec::new();
    for k in targets {
        let amount = SlashPolicy::amount(bps, state.slashable(k));
        if amount > 0 {
            slashed.push((k, amount));
            changes.push(Change::Slash { key: k, amount });
        }
    }
    changes.push(Change::ResolveChallenge { id: *id, verdict });
    Ok((
        Adjudication { challenge_id: *id, verdict: Some(verdict), slashed },
        StateUpdate::new(UpdateCause::Adjudication, changes),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{apply_updates, Epoch, NodeIdentity, Role};

    fn setup(full_proof: bool) -> (ProtocolState, Digest) {
        let s = ProtocolState::genesis(
            Epoch::new(0, 0, 100, 50).unwrap(),
            vec![
                NodeIdentity::genesis(StakingKey(1), Role::Verification, 40, 0),
                NodeIdentity::genesis(StakingKey(2), Role::Execution, 200, 1),
            ],
        )
        .unwrap();
        let c = SlashingChallenge {
            kind: ChallengeKind::FaultyComputation,
            challenger: StakingKey(1),
            accused: vec![StakingKey(2)],
            evidence: vec![hash(b"x", b"receipt")],
            deadline: 500,
            full_proof,
        };
        let id = c.id();
        let u = StateUpdate::new(UpdateCause::Slash, vec![Change::RecordChallenge(c)]);
        (apply_updates(&s, &[u]).unwrap().0, id)
    }

    #[test]
    fn silent_accused_slashed_after_timeout() {
        let (s, id) = setup(false);
        let p = SlashPolicy::default();
        let (adj, u) = adjudicate_challenge(&s, &id, None, false, &p).unwrap();
        assert_eq!(adj.verdict, None);
        assert!(u.changes.is_empty());
        let (adj, u) = adjudicate_challenge(&s, &id, None, true, &p).unwrap();
        assert_eq!(adj.verdict, Some(Verdict::AccusedAtFault));
        assert_eq!(adj.slashed, vec![(StakingKey(2), 200)]);
        let (s2, _, _) = apply_updates(&s, &[u]).unwrap();
        assert_eq!(s2.node(StakingKey(2)).unwrap().stake, 0);
        assert!(s2.pending_challenges().next().is_none());
        assert!(matches!(adjudicate_challenge(&s2, &id, None, true, &p), Err(StateError::ChallengeClosed(_))));
    }

    #[test]
    fn correct_response_slashes_challenger() {
        let (s, id) = setup(false);
        let (adj, _) = adjudicate_challenge(&s, &id, Some(Verdict::ChallengerAtFault), false, &SlashPolicy::default()).unwrap();
        assert_eq!(adj.slashed, vec![(StakingKey(1), 40)]);
    }

    #[test]
    fn full_proof_needs_no_wait() {
        let (s, id) = setup(true);
        let (adj, _) = adjudicate_challenge(&s, &id, None, false, &SlashPolicy::default()).unwrap();
        assert_eq!(adj.verdict, Some(Verdict::AccusedAtFault));
    }

    #[test]
    fn unknown_id() {
        let (s, _) = setup(false);
        let bogus = hash(b"x", b"nothing");
        assert_eq!(
            adjudicate_challenge(&s, &bogus, None, true, &SlashPolicy::default()).unwrap_err(),
            StateError::UnknownChallenge(bogus)
        );
    }

    #[test]
    fn partial_fraction() {
        assert_eq!(SlashPolicy::amount(500, 200), 10);
        assert_eq!(SlashPolicy::amount(10_000, 7), 7);
    }
}

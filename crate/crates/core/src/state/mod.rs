// SPDX-License-Identifier: Apache-2.0

//! Node identities, stake accounting, epochs and the committed protocol state.
//!
//! [`ProtocolState`] is mutated only through [`StateUpdate`]s. Every update
//! applied with [`ProtocolState::apply_update`] yields an [`UndoLog`] that
//! restores the prior contents exactly. The commitment is the hash of the
//! canonical serialization described in `docs/state-format.md`.

mod challenge;
mod stake;

pub use challenge::{
    adjudicate_challenge, Adjudication, ChallengeKind, ChallengeRecord, ChallengeStatus,
    SlashPolicy, SlashingChallenge, Verdict,
};
pub use stake::{effective_votes, meets_supermajority, Committee};

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, Digest, StakingKey, StakingSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Collector,
    Consensus,
    Execution,
    Verification,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Collector, Role::Consensus, Role::Execution, Role::Verification];

    pub fn code(self) -> u8 {
        match self {
            Role::Collector => 0,
            Role::Consensus => 1,
            Role::Execution => 2,
            Role::Verification => 3,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Collector => "collector",
            Role::Consensus => "consensus",
            Role::Execution => "execution",
            Role::Verification => "verification",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeIdentity {
    pub staking_key: StakingKey,
    pub role: Role,
    pub stake: u64,
    /// Deposits that become active at the next epoch boundary.
    pub pending_stake: u64,
    pub address: u32,
    pub drb_public_key: Option<BigUint>,
    pub activation_epoch: u64,
    pub discharge_epoch: Option<u64>,
}

impl NodeIdentity {
    pub fn genesis(staking_key: StakingKey, role: Role, stake: u64, address: u32) -> Self {
        Self {
            staking_key,
            role,
            stake,
            pending_stake: 0,
            address,
            drb_public_key: None,
            activation_epoch: 0,
            discharge_epoch: None,
        }
    }

    pub fn is_active(&self, epoch: u64) -> bool {
        self.activation_epoch <= epoch && self.discharge_epoch.is_none_or(|d| epoch < d)
    }
}

impl Canonical for NodeIdentity {
    fn encode(&self, enc: &mut Encoder) {
        let drb = self.drb_public_key.as_ref().map(|k| k.to_bytes_be());
        enc.u64(self.staking_key.0)
            .u8(self.role.code())
            .u64(self.stake)
            .u64(self.pending_stake)
            .u32(self.address)
            .opt_bytes(drb.as_deref())
            .u64(self.activation_epoch)
            .opt_u64(self.discharge_epoch);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epoch {
    pub index: u64,
    pub start_height: u64,
    pub length_blocks: u64,
    pub staking_deadline_height: u64,
}

impl Epoch {
    pub fn new(index: u64, start_height: u64, length_blocks: u64, staking_deadline_height: u64) -> Result<Self, StateError> {
        if length_blocks == 0 || staking_deadline_height >= start_height + length_blocks {
            return Err(StateError::InvalidEpoch);
        }
        Ok(Self { index, start_height, length_blocks, staking_deadline_height })
    }

    pub fn next(&self) -> Epoch {
        let start = self.start_height + self.length_blocks;
        Epoch {
            index: self.index + 1,
            start_height: start,
            length_blocks: self.length_blocks,
            staking_deadline_height: start + (self.staking_deadline_height - self.start_height),
        }
    }
}

impl Canonical for Epoch {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.index).u64(self.start_height).u64(self.length_blocks).u64(self.staking_deadline_height);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldStake {
    pub amount: u64,
    pub release_epoch: u64,
}

/// Running totals for the conservation audit:
/// `active + pending + held + slashed + refunded + withdrawn == genesis + deposited`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeLedger {
    pub genesis_total: u64,
    pub deposited: u64,
    pub withdrawn: u64,
    pub slashed: u64,
    pub refunded: u64,
}

impl Canonical for StakeLedger {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.genesis_total).u64(self.deposited).u64(self.withdrawn).u64(self.slashed).u64(self.refunded);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateCause {
    Stake,
    Unstake,
    Slash,
    Adjudication,
    Epoch,
}

impl UpdateCause {
    fn code(self) -> u8 {
        match self {
            UpdateCause::Stake => 0,
            UpdateCause::Unstake => 1,
            UpdateCause::Slash => 2,
            UpdateCause::Adjudication => 3,
            UpdateCause::Epoch => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Change {
    Create(NodeIdentity),
    /// Immediate change to active stake; rejected if it would go negative.
    AdjustStake { key: StakingKey, delta: i64 },
    /// Adds to pending stake, activated at the next epoch boundary.
    Deposit { key: StakingKey, amount: u64 },
    /// Takes from active stake first, then held stake; clamps at zero.
    Slash { key: StakingKey, amount: u64 },
    Unstake { key: StakingKey },
    SetDrbKey { key: StakingKey, drb_public_key: BigUint },
    AdvanceEpoch,
    RecordChallenge(SlashingChallenge),
    ResolveChallenge { id: Digest, verdict: Verdict },
}

impl Change {
    pub fn kind(&self) -> &'static str {
        match self {
            Change::Create(_) => "create",
            Change::AdjustStake { .. } => "adjust_stake",
            Change::Deposit { .. } => "deposit",
            Change::Slash { .. } => "slash",
            Change::Unstake { .. } => "unstake",
            Change::SetDrbKey { .. } => "set_drb_key",
            Change::AdvanceEpoch => "advance_epoch",
            Change::RecordChallenge(_) => "record_challenge",
            Change::ResolveChallenge { .. } => "resolve_challenge",
        }
    }
}

impl Canonical for Change {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Change::Create(node) => {
                enc.u8(0);
                node.encode(enc);
            }
            Change::AdjustStake { key, delta } => {
                enc.u8(1).u64(key.0).u64(*delta as u64);
            }
            Change::Deposit { key, amount } => {
                enc.u8(2).u64(key.0).u64(*amount);
            }
            Change::Slash { key, amount } => {
                enc.u8(3).u64(key.0).u64(*amount);
            }
            Change::Unstake { key } => {
                enc.u8(4).u64(key.0);
            }
            Change::SetDrbKey { key, drb_public_key } => {
                enc.u8(5).u64(key.0).bytes(&drb_public_key.to_bytes_be());
            }
            Change::AdvanceEpoch => {
                enc.u8(6);
            }
            Change::RecordChallenge(c) => {
                enc.u8(7);
                c.encode(enc);
            }
            Change::ResolveChallenge { id, verdict } => {
                enc.u8(8).digest(id).u8(verdict.code());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateUpdate {
    pub cause: UpdateCause,
    pub changes: Vec<Change>,
}

impl StateUpdate {
    pub fn new(cause: UpdateCause, changes: Vec<Change>) -> Self {
        Self { cause, changes }
    }
}

impl Canonical for StateUpdate {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.cause.code());
        self.changes.encode(enc);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StateEvent {
    OverSlash { key: StakingKey, requested: u64, applied: u64 },
    Refund { key: StakingKey, amount: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("unknown node {0}")]
    UnknownNode(StakingKey),
    #[error("node {0} already exists")]
    DuplicateNode(StakingKey),
    #[error("stake of {key} would become negative ({have} + {delta})")]
    NegativeStake { key: StakingKey, have: u64, delta: i64 },
    #[error("group has zero total stake")]
    ZeroStakeGroup,
    #[error("voter {0} is not a member of the group")]
    VoterNotInGroup(StakingKey),
    #[error("unknown challenge {0}")]
    UnknownChallenge(Digest),
    #[error("challenge {0} already recorded")]
    DuplicateChallenge(Digest),
    #[error("challenge {0} is already resolved")]
    ChallengeClosed(Digest),
    #[error("node {0} is already unstaking")]
    AlreadyUnstaking(StakingKey),
    #[error("challenge names an unstaked party {0}")]
    UnstakedParty(StakingKey),
    #[error("epoch parameters are inconsistent")]
    InvalidEpoch,
}

/// Prior values of everything an update touched.
#[derive(Debug, Clone, Default)]
pub struct UndoLog {
    records: Vec<(StakingKey, Option<NodeIdentity>)>,
    held: Vec<(StakingKey, Option<HeldStake>)>,
    challenges: Vec<(Digest, Option<ChallengeRecord>)>,
    epoch: Option<Epoch>,
    ledger: Option<StakeLedger>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolState {
    pub records: BTreeMap<StakingKey, NodeIdentity>,
    pub held: BTreeMap<StakingKey, HeldStake>,
    pub epoch: Epoch,
    pub challenges: BTreeMap<Digest, ChallengeRecord>,
    pub drb_group_key: Option<BigUint>,
    pub ledger: StakeLedger,
}

impl ProtocolState {
    pub fn genesis(epoch: Epoch, nodes: Vec<NodeIdentity>) -> Result<Self, StateError> {
        let mut records = BTreeMap::new();
        let mut total = 0u64;
        for n in nodes {
            total += n.stake + n.pending_stake;
            let key = n.staking_key;
            if records.insert(key, n).is_some() {
                return Err(StateError::DuplicateNode(key));
            }
        }
        Ok(Self {
            records,
            held: BTreeMap::new(),
            epoch,
            challenges: BTreeMap::new(),
            drb_group_key: None,
            ledger: StakeLedger { genesis_total: total, ..Default::default() },
        })
    }

    pub fn node(&self, key: StakingKey) -> Option<&NodeIdentity> {
        self.records.get(&key)
    }

    pub fn is_active(&self, key: StakingKey) -> bool {
        self.records.get(&key).is_some_and(|n| n.is_active(self.epoch.index))
    }

    /// Active members of `role` weighted by live stake.
    pub fn committee(&self, role: Role) -> Committee {
        Committee::new(
            self.records
                .values()
                .filter(|n| n.role == role && n.is_active(self.epoch.index))
                .map(|n| (n.staking_key, n.stake))
                .collect(),
        )
    }

    pub fn role_total_stake(&self, role: Role) -> u128 {
        self.committee(role).total_stake()
    }

    /// Active + pending + held stake of one node: the slashable amount.
    pub fn slashable(&self, key: StakingKey) -> u64 {
        let rec = self.records.get(&key).map_or(0, |n| n.stake + n.pending_stake);
        rec + self.held.get(&key).map_or(0, |h| h.amount)
    }

    pub fn conservation_holds(&self) -> bool {
        let live: u128 = self.records.values().map(|n| n.stake as u128 + n.pending_stake as u128).sum();
        let held: u128 = self.held.values().map(|h| h.amount as u128).sum();
        let l = &self.ledger;
        live + held + l.slashed as u128 + l.refunded as u128 + l.withdrawn as u128
            == l.genesis_total as u128 + l.deposited as u128
    }

    pub fn pending_challenges(&self) -> impl Iterator<Item = &ChallengeRecord> {
        self.challenges.values().filter(|c| c.status == ChallengeStatus::Pending)
    }

    pub fn commitment(&self) -> Digest {
        commit_state(self)
    }

    fn save_record(&self, undo: &mut UndoLog, key: StakingKey) {
        if !undo.records.iter().any(|(k, _)| *k == key) {
            undo.records.push((key, self.records.get(&key).cloned()));
        }
    }

    fn save_held(&self, undo: &mut UndoLog, key: StakingKey) {
        if !undo.held.iter().any(|(k, _)| *k == key) {
            undo.held.push((key, self.held.get(&key).copied()));
        }
    }

    fn save_ledger(&self, undo: &mut UndoLog) {
        undo.ledger.get_or_insert(self.ledger);
    }

    /// Applies every change of `update` or none of them.
    pub fn apply_update(&mut self, update: &StateUpdate) -> Result<(UndoLog, Vec<StateEvent>), StateError> {
        let mut undo = UndoLog::default();
        let mut events = Vec::new();
        for change in &update.changes {
            if let Err(e) = self.apply_change(change, &mut undo, &mut events) {
                self.revert(undo);
                return Err(e);
            }
        }
        Ok((undo, events))
    }

    pub fn revert(&mut self, undo: UndoLog) {
        for (k, v) in undo.records.into_iter().rev() {
            match v {
                Some(n) => self.records.insert(k, n),
                None => self.records.remove(&k),
            };
        }
        for (k, v) in undo.held.into_iter().rev() {
            match v {
                Some(h) => self.held.insert(k, h),
                None => self.held.remove(&k),
            };
        }
        for (k, v) in undo.challenges.into_iter().rev() {
            match v {
                Some(c) => self.challenges.insert(k, c),
                None => self.challenges.remove(&k),
            };
        }
        if let Some(e) = undo.epoch {
            self.epoch = e;
        }
        if let Some(l) = undo.ledger {
            self.ledger = l;
        }
    }

    fn apply_change(&mut self, change: &Change, undo: &mut UndoLog, events: &mut Vec<StateEvent>) -> Result<(), StateError> {
        match change {
            Change::Create(node) => {
                let key = node.staking_key;
                if self.records.contains_key(&key) {
                    return Err(StateError::DuplicateNode(key));
                }
                self.save_record(undo, key);
                self.save_ledger(undo);
                self.ledger.deposited += node.stake + node.pending_stake;
                self.records.insert(key, node.clone());
            }
            Change::AdjustStake { key, delta } => {
                let have = self.records.get(key).ok_or(StateError::UnknownNode(*key))?.stake;
                let new = have as i128 + *delta as i128;
                if new < 0 {
                    return Err(StateError::NegativeStake { key: *key, have, delta: *delta });
                }
                self.save_record(undo, *key);
                self.save_ledger(undo);
                if *delta >= 0 {
                    self.ledger.deposited += *delta as u64;
                } else {
                    self.ledger.withdrawn += delta.unsigned_abs();
                }
                self.records.get_mut(key).expect("checked").stake = new as u64;
            }
            Change::Deposit { key, amount } => {
                if !self.records.contains_key(key) {
                    return Err(StateError::UnknownNode(*key));
                }
                self.save_record(undo, *key);
                self.save_ledger(undo);
                self.ledger.deposited += amount;
                self.records.get_mut(key).expect("checked").pending_stake += amount;
            }
            Change::Slash { key, amount } => {
                if !self.records.contains_key(key) && !self.held.contains_key(key) {
                    return Err(StateError::UnknownNode(*key));
                }
                self.save_record(undo, *key);
                self.save_held(undo, *key);
                self.save_ledger(undo);
                let mut left = *amount;
                if let Some(n) = self.records.get_mut(key) {
                    for pool in [&mut n.stake, &mut n.pending_stake] {
                        let take = left.min(*pool);
                        *pool -= take;
                        left -= take;
                    }
                }
                if let Some(h) = self.held.get_mut(key) {
                    let take = left.min(h.amount);
                    h.amount -= take;
                    left -= take;
                }
                let applied = amount - left;
                self.ledger.slashed += applied;
                if left > 0 {
                    events.push(StateEvent::OverSlash { key: *key, requested: *amount, applied });
                }
            }
            Change::Unstake { key } => {
                let node = self.records.get(key).ok_or(StateError::UnknownNode(*key))?;
                if node.discharge_epoch.is_some() {
                    return Err(StateError::AlreadyUnstaking(*key));
                }
                self.save_record(undo, *key);
                self.records.get_mut(key).expect("checked").discharge_epoch = Some(self.epoch.index + 1);
            }
            Change::SetDrbKey { key, drb_public_key } => {
                if !self.records.contains_key(key) {
                    return Err(StateError::UnknownNode(*key));
                }
                self.save_record(undo, *key);
                self.records.get_mut(key).expect("checked").drb_public_key = Some(drb_public_key.clone());
            }
            Change::AdvanceEpoch => self.advance_epoch(undo, events),
            Change::RecordChallenge(c) => {
                let id = c.id();
                if self.challenges.contains_key(&id) {
                    return Err(StateError::DuplicateChallenge(id));
                }
                for k in std::iter::once(&c.challenger).chain(&c.accused) {
                    if !self.records.contains_key(k) && !self.held.contains_key(k) {
                        return Err(StateError::UnstakedParty(*k));
                    }
                }
                undo.challenges.push((id, None));
                self.challenges.insert(id, ChallengeRecord { challenge: c.clone(), status: ChallengeStatus::Pending });
            }
            Change::ResolveChallenge { id, verdict } => {
                let rec = self.challenges.get(id).ok_or(StateError::UnknownChallenge(*id))?;
                if rec.status != ChallengeStatus::Pending {
                    return Err(StateError::ChallengeClosed(*id));
                }
                undo.challenges.push((*id, Some(rec.clone())));
                self.challenges.get_mut(id).expect("checked").status = ChallengeStatus::Resolved(*verdict);
            }
        }
        Ok(())
    }

    fn advance_epoch(&mut self, undo: &mut UndoLog, events: &mut Vec<StateEvent>) {
        undo.epoch.get_or_insert(self.epoch);
        self.save_ledger(undo);
        let next = self.epoch.next();
        let keys: Vec<StakingKey> = self.records.keys().copied().collect();
        for key in keys {
            let n = &self.records[&key];
            let discharged = n.discharge_epoch == Some(next.index);
            if n.pending_stake == 0 && !discharged {
                continue;
            }
            self.save_record(undo, key);
            self.save_held(undo, key);
            let n = self.records.get_mut(&key).expect("present");
            n.stake += std::mem::take(&mut n.pending_stake);
            if discharged {
                let amount = std::mem::take(&mut n.stake);
                let h = self.held.entry(key).or_insert(HeldStake { amount: 0, release_epoch: next.index + 1 });
                h.amount += amount;
                h.release_epoch = next.index + 1;
            }
        }
        let released: Vec<StakingKey> =
            self.held.iter().filter(|(_, h)| h.release_epoch <= next.index).map(|(k, _)| *k).collect();
        for key in released {
            self.save_held(undo, key);
            let h = self.held.remove(&key).expect("present");
            self.ledger.refunded += h.amount;
            events.push(StateEvent::Refund { key, amount: h.amount });
        }
        self.epoch = next;
    }
}

impl Canonical for ProtocolState {
    fn encode(&self, enc: &mut Encoder) {
        self.epoch.encode(enc);
        enc.len_prefix(self.records.len());
        for node in self.records.values() {
            node.encode(enc);
        }
        enc.len_prefix(self.held.len());
        for (k, h) in &self.held {
            enc.u64(k.0).u64(h.amount).u64(h.release_epoch);
        }
        enc.len_prefix(self.challenges.len());
        for (id, rec) in &self.challenges {
            enc.digest(id);
            rec.encode(enc);
        }
        let gk = self.drb_group_key.as_ref().map(|k| k.to_bytes_be());
        enc.opt_bytes(gk.as_deref());
        self.ledger.encode(enc);
    }
}

/// `hash("protocol-state", canonical serialization)`.
pub fn commit_state(state: &ProtocolState) -> Digest {
    hash(b"protocol-state", &state.canonical_bytes())
}

/// Applies all updates atomically and returns the new state with its
/// commitment.
pub fn apply_updates(
    state: &ProtocolState,
    updates: &[StateUpdate],
) -> Result<(ProtocolState, Digest, Vec<StateEvent>), StateError> {
    let mut next = state.clone();
    let mut events = Vec::new();
    for u in updates {
        let (_, ev) = next.apply_update(u)?;
        events.extend(ev);
    }
    let c = commit_state(&next);
    Ok((next, c, events))
}

/// Per-role minimum stake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimumStakes {
    pub collector: u64,
    pub consensus: u64,
    pub execution: u64,
    pub verification: u64,
}

impl Default for MinimumStakes {
    fn default() -> Self {
        Self { collector: 10, consensus: 100, execution: 100, verification: 10 }
    }
}

impl MinimumStakes {
    pub fn for_role(&self, role: Role) -> u64 {
        match role {
            Role::Collector => self.collector,
            Role::Consensus => self.consensus,
            Role::Execution => self.execution,
            Role::Verification => self.verification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StakeRequest {
    pub staking_key: StakingKey,
    pub role: Role,
    pub amount: u64,
    pub address: u32,
    pub signature: StakingSignature,
}

impl StakeRequest {
    pub fn signing_bytes(key: StakingKey, role: Role, amount: u64, address: u32) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(b"stake-request").u64(key.0).u8(role.code()).u64(amount).u32(address);
        enc.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StakeRejection {
    #[error("request at height {height} is past the staking deadline {deadline}")]
    PastDeadline { deadline: u64, height: u64 },
    #[error("{amount} is below the {role} minimum of {minimum}")]
    BelowMinimum { role: Role, minimum: u64, amount: u64 },
    #[error("request signature does not verify")]
    BadSignature,
    #[error("node is staked as {existing}, not {requested}")]
    RoleMismatch { existing: Role, requested: Role },
    #[error("node is discharged or unstaking")]
    Unstaking,
}

/// Accepted iff `current_height <= staking_deadline_height`. New nodes become
/// active at the next epoch; deposits of existing nodes likewise.
pub fn process_stake_request(
    state: &ProtocolState,
    req: &StakeRequest,
    current_height: u64,
    minimums: &MinimumStakes,
) -> Result<StateUpdate, StakeRejection> {
    let msg = StakeRequest::signing_bytes(req.staking_key, req.role, req.amount, req.address);
    if !req.staking_key.verify(&msg, &req.signature) {
        return Err(StakeRejection::BadSignature);
    }
    if current_height > state.epoch.staking_deadline_height {
        return Err(StakeRejection::PastDeadline { deadline: state.epoch.staking_deadline_height, height: current_height });
    }
    let change = match state.node(req.staking_key) {
        Some(existing) => {
            if existing.role != req.role {
                return Err(StakeRejection::RoleMismatch { existing: existing.role, requested: req.role });
            }
            if existing.discharge_epoch.is_some() {
                return Err(StakeRejection::Unstaking);
            }
            Change::Deposit { key: req.staking_key, amount: req.amount }
        }
        None => {
            let minimum = minimums.for_role(req.role);
            if req.amount < minimum {
                return Err(StakeRejection::BelowMinimum { role: req.role, minimum, amount: req.amount });
            }
            Change::Create(NodeIdentity {
                staking_key: req.staking_key,
                role: req.role,
                stake: 0,
                pending_stake: req.amount,
                address: req.address,
                drb_public_key: None,
                activation_epoch: state.epoch.index + 1,
                discharge_epoch: None,
            })
        }
    };
    Ok(StateUpdate::new(UpdateCause::Stake, vec![change]))
}

/// Discharges the node from the next epoch; its stake is held, and still
/// slashable, for one further epoch before refund.
pub fn process_unstake_request(state: &ProtocolState, key: StakingKey) -> Result<StateUpdate, StateError> {
    let node = state.node(key).ok_or(StateError::UnknownNode(key))?;
    if node.discharge_epoch.is_some() {
        return Err(StateError::AlreadyUnstaking(key));
    }
    Ok(StateUpdate::new(UpdateCause::Unstake, vec![Change::Unstake { key }]))
}

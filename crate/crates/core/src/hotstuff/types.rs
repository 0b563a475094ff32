// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{hash, Digest, StakingKey, StakingKeyPair, StakingSignature};
use crate::state::{meets_supermajority, Committee};

pub trait Payload: Clone + fmt::Debug + Canonical {}

impl<T: Clone + fmt::Debug + Canonical> Payload for T {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuorumCertificate {
    pub block_id: Digest,
    pub round: u64,
    /// Sorted by signer key; the signer bitmap is implied by the committee.
    pub votes: Vec<(StakingKey, StakingSignature)>,
}

impl QuorumCertificate {
    pub fn genesis(block_id: Digest) -> Self {
        Self { block_id, round: 0, votes: Vec::new() }
    }

    pub fn signers(&self) -> impl Iterator<Item = &StakingKey> {
        self.votes.iter().map(|(k, _)| k)
    }

    pub fn bitmap(&self, committee: &Committee) -> Vec<bool> {
        committee.keys().map(|k| self.votes.iter().any(|(s, _)| *s == k)).collect()
    }

    /// Distinct authorized signers with valid signatures holding more than
    /// 2/3 of the committee stake.
    pub fn verify(&self, domain: &[u8], committee: &Committee) -> bool {
        if self.votes.windows(2).any(|w| w[0].0 >= w[1].0) {
            return false;
        }
        let msg = vote_bytes(domain, &self.block_id, self.round);
        for (k, s) in &self.votes {
            if !committee.contains(*k) || !k.verify(&msg, s) {
                return false;
            }
        }
        committee.effective_votes(self.signers()).is_ok_and(meets_supermajority)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsBlock<P> {
    pub round: u64,
    pub height: u64,
    pub parent: Digest,
    pub justify: QuorumCertificate,
    pub payload: P,
    pub proposer: StakingKey,
    /// Leader-chosen nonce; honest leaders always use 0.
    pub salt: u64,
    id: Digest,
}

impl<P: Payload> HsBlock<P> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: &[u8],
        round: u64,
        height: u64,
        parent: Digest,
        justify: QuorumCertificate,
        payload: P,
        proposer: StakingKey,
        salt: u64,
    ) -> Self {
        let mut enc = Encoder::new();
        enc.bytes(domain)
            .u64(round)
            .u64(height)
            .digest(&parent)
            .digest(&justify.block_id)
            .u64(justify.round)
            .u64(proposer.0)
            .u64(salt);
        payload.encode(&mut enc);
        let id = hash(b"hs-block", &enc.finish());
        Self { round, height, parent, justify, payload, proposer, salt, id }
    }

    pub fn genesis(domain: &[u8], payload: P) -> Self {
        Self::new(domain, 0, 0, Digest::ZERO, QuorumCertificate::genesis(Digest::ZERO), payload, StakingKey(0), 0)
    }
}

impl<P> HsBlock<P> {
    pub fn id(&self) -> Digest {
        self.id
    }
}

#[derive(Debug, Clone)]
pub struct Proposal<P> {
    pub block: Arc<HsBlock<P>>,
    pub signature: StakingSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vote {
    pub block_id: Digest,
    pub round: u64,
    pub voter: StakingKey,
    pub signature: StakingSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimeoutMsg {
    pub round: u64,
    pub high_qc: QuorumCertificate,
    pub voter: StakingKey,
    pub signature: StakingSignature,
}

#[derive(Debug, Clone)]
pub enum Message<P> {
    Proposal(Proposal<P>),
    Vote(Vote),
    Timeout(TimeoutMsg),
    RequestBlock(Digest),
}

impl<P> Message<P> {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Proposal(_) => "proposal",
            Message::Vote(_) => "vote",
            Message::Timeout(_) => "timeout",
            Message::RequestBlock(_) => "request_block",
        }
    }
}

/// Two signed proposals by the same leader for the same round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EquivocationEvidence {
    pub proposer: StakingKey,
    pub round: u64,
    pub first: (Digest, StakingSignature),
    pub second: (Digest, StakingSignature),
}

impl EquivocationEvidence {
    pub fn verify(&self, domain: &[u8]) -> bool {
        self.first.0 != self.second.0
            && self.proposer.verify(&proposal_bytes(domain, &self.first.0), &self.first.1)
            && self.proposer.verify(&proposal_bytes(domain, &self.second.0), &self.second.1)
    }
}

pub(crate) fn proposal_bytes(domain: &[u8], id: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"hs-proposal").bytes(domain).digest(id);
    enc.finish()
}

pub(crate) fn vote_bytes(domain: &[u8], id: &Digest, round: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"hs-vote").bytes(domain).digest(id).u64(round);
    enc.finish()
}

pub(crate) fn timeout_bytes(domain: &[u8], round: u64, high_qc_round: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(b"hs-timeout").bytes(domain).u64(round).u64(high_qc_round);
    enc.finish()
}

pub(crate) fn sign_proposal<P>(domain: &[u8], block: Arc<HsBlock<P>>, kp: &StakingKeyPair) -> Proposal<P> {
    let signature = kp.sign(&proposal_bytes(domain, &block.id));
    Proposal { block, signature }
}

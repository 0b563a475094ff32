// SPDX-License-Identifier: Apache-2.0

//! Stake-weighted chained HotStuff, shared by collector clusters and the main
//! consensus committee.
//!
//! The engine is a sans-IO state machine: callers feed it messages and timer
//! expiries and carry out the returned [`Action`]s. Payload semantics live
//! behind [`App`].

mod engine;
mod types;

pub use engine::{
    leader_for_round, Action, App, BlockTree, ConsensusEvent, Engine, EngineConfig, Validation,
};
pub use types::{
    EquivocationEvidence, HsBlock, Message, Payload, Proposal, QuorumCertificate, TimeoutMsg, Vote,
};

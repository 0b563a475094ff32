// SPDX-License-Identifier: Apache-2.0

//! Hashing, seeded randomness, staking signatures and the threshold scheme
//! behind the random beacon.

mod dkg;
mod hash;
mod staking;
mod stream;
mod threshold;

pub use dkg::{
    commitment_eval, dealer_polynomials, dkg_setup, dkg_setup_with_faults, feldman_verify, Complaint,
    DealerFault, DkgTranscript,
};
pub use hash::{digest_mod, hash, hash_parts, Digest};
pub use staking::{StakingKey, StakingKeyPair, StakingSignature};
pub use stream::{derive_seed, fisher_yates_shuffle, shuffle_in_place, stream_word, Seed, SeededStream};
pub use threshold::{
    compute_threshold_t, lagrange_coefficients_at_zero, message_exponent, sign_with_exponent,
    threshold_recover, threshold_sign, threshold_verify, verify_share, GroupParams, GroupSignature,
    SecretShare, SignatureShare, ThresholdParams, VerificationVector,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("randomness input must not be empty")]
    EmptyRandomness,
    #[error("committee size must be at least 1")]
    EmptyCommittee,
    #[error("invalid group parameters: {0}")]
    InvalidGroup(&'static str),
    #[error("insufficient signature shares: have {have} distinct, need {need}")]
    InsufficientShares { have: usize, need: usize },
    #[error("signature share from party {party} does not verify")]
    InvalidShare { party: u32 },
    #[error("party index {0} out of range")]
    UnknownParty(u32),
    #[error("expected {expected} entropy seeds, got {got}")]
    EntropyMismatch { expected: usize, got: usize },
    #[error("every dealer was disqualified")]
    NoQualifiedDealers,
}

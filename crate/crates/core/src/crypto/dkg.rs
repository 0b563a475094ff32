// SPDX-License-Identifier: Apache-2.0

//! Joint-Feldman distributed key generation.
//!
//! Every party deals a degree-`t` polynomial, publishes Feldman commitments
//! `C_k = g^{a_k}` and hands party `j` the evaluation `f(j)`. Recipients check
//! `g^{f(j)} == prod_k C_k^{j^k}`. A dealer with any failing evaluation is
//! disqualified on the spot (one complaint record per failed check, no
//! dispute round). Shares and the group key are summed over the qualified
//! dealers.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::Serialize;

use super::threshold::{GroupParams, SecretShare, ThresholdParams, VerificationVector};
use super::{derive_seed, CryptoError, Seed};

/// Makes `dealer` send a corrupted evaluation to `recipient`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DealerFault {
    pub dealer: u32,
    pub recipient: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Complaint {
    pub accuser: u32,
    pub dealer: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DkgTranscript {
    pub verification: VerificationVector,
    pub shares: Vec<SecretShare>,
    /// `commitments[i - 1]` is dealer `i`'s commitment vector.
    pub commitments: Vec<Vec<BigUint>>,
    pub complaints: Vec<Complaint>,
    pub qualified: Vec<u32>,
}

/// Coefficients `a_{i,0..=t}` of every dealer's polynomial, drawn from the
/// dealer's entropy. Exposed so tests can materialize `sk_G`.
pub fn dealer_polynomials(
    params: &ThresholdParams,
    entropy: &[Seed],
) -> Result<Vec<Vec<BigUint>>, CryptoError> {
    if entropy.len() != params.committee_size {
        return Err(CryptoError::EntropyMismatch { expected: params.committee_size, got: entropy.len() });
    }
    entropy
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut material = seed.as_bytes().to_vec();
            material.extend_from_slice(&(i as u32 + 1).to_be_bytes());
            let mut stream = derive_seed(&["dkg", "dealer"], &material)?.stream();
            Ok((0..=params.threshold).map(|_| stream.next_biguint_below(&params.group.q)).collect())
        })
        .collect()
}

fn eval_poly(coeffs: &[BigUint], x: u32, q: &BigUint) -> BigUint {
    let x = BigUint::from(x);
    coeffs.iter().rev().fold(BigUint::zero(), |acc, a| (acc * &x + a) % q)
}

/// `prod_k C_k^{j^k} mod p`, i.e. `g^{f(j)}` for an honest dealing.
pub fn commitment_eval(group: &GroupParams, commitments: &[BigUint], j: u32) -> BigUint {
    let x = BigUint::from(j);
    let mut power = BigUint::one();
    let mut acc = BigUint::one();
    for c in commitments {
        acc = (acc * c.modpow(&power, &group.p)) % &group.p;
        power = (power * &x) % &group.q;
    }
    acc
}

pub fn feldman_verify(group: &GroupParams, commitments: &[BigUint], j: u32, share: &BigUint) -> bool {
    group.exp(share) == commitment_eval(group, commitments, j)
}

pub fn dkg_setup(params: &ThresholdParams, entropy: &[Seed]) -> Result<DkgTranscript, CryptoError> {
    dkg_setup_with_faults(params, entropy, &[])
}

pub fn dkg_setup_with_faults(
    params: &ThresholdParams,
    entropy: &[Seed],
    faults: &[DealerFault],
) -> Result<DkgTranscript, CryptoError> {
    let group = &params.group;
    let n = params.committee_size as u32;
    let polys = dealer_polynomials(params, entropy)?;
    let commitments: Vec<Vec<BigUint>> =
        polys.iter().map(|coeffs| coeffs.iter().map(|a| group.exp(a)).collect()).collect();

    // evaluations[i][j - 1]: what dealer i + 1 sends party j
    let mut evaluations: Vec<Vec<BigUint>> = polys
        .iter()
        .map(|coeffs| (1..=n).map(|j| eval_poly(coeffs, j, &group.q)).collect())
        .collect();
    for f in faults {
        if f.dealer == 0 || f.dealer > n {
            return Err(CryptoError::UnknownParty(f.dealer));
        }
        if f.recipient == 0 || f.recipient > n {
            return Err(CryptoError::UnknownParty(f.recipient));
        }
        let slot = &mut evaluations[f.dealer as usize - 1][f.recipient as usize - 1];
        *slot = (&*slot + 1u32) % &group.q;
    }

    let mut complaints = Vec::new();
    for (i, evals) in evaluations.iter().enumerate() {
        for (j, v) in evals.iter().enumerate() {
            if !feldman_verify(group, &commitments[i], j as u32 + 1, v) {
                complaints.push(Complaint { accuser: j as u32 + 1, dealer: i as u32 + 1 });
            }
        }
    }
    let qualified: Vec<u32> =
        (1..=n).filter(|d| !complaints.iter().any(|c| c.dealer == *d)).collect();
    if qualified.is_empty() {
        return Err(CryptoError::NoQualifiedDealers);
    }

    let shares: Vec<SecretShare> = (1..=n)
        .map(|j| {
            let value = qualified.iter().fold(BigUint::zero(), |acc, &d| {
                (acc + &evaluations[d as usize - 1][j as usize - 1]) % &group.q
            });
            SecretShare { index: j, value }
        })
        .collect();

    let group_public_key = qualified
        .iter()
        .fold(BigUint::one(), |acc, &d| (acc * &commitments[d as usize - 1][0]) % &group.p);
    let party_public_keys = (1..=n)
        .map(|j| {
            qualified.iter().fold(BigUint::one(), |acc, &d| {
                (acc * commitment_eval(group, &commitments[d as usize - 1], j)) % &group.p
            })
        })
        .collect();

    Ok(DkgTranscript {
        verification: VerificationVector { group_public_key, party_public_keys },
        shares,
        commitments,
        complaints,
        qualified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash, threshold_recover, threshold_sign, threshold_verify};

    fn entropy(n: usize, tag: &[u8]) -> Vec<Seed> {
        (0..n).map(|i| Seed(hash(tag, &(i as u64).to_be_bytes()))).collect()
    }

    #[test]
    fn single_party() {
        let params = ThresholdParams::new(1, GroupParams::tiny()).unwrap();
        let e = entropy(1, b"solo");
        let tr = dkg_setup(&params, &e).unwrap();
        let sk = dealer_polynomials(&params, &e).unwrap()[0][0].clone();
        assert_eq!(tr.shares[0].value, sk);
        assert_eq!(tr.verification.group_public_key, params.group.exp(&sk));
    }

    #[test]
    fn party_keys_match_shares() {
        let params = ThresholdParams::new(7, GroupParams::tiny()).unwrap();
        let tr = dkg_setup(&params, &entropy(7, b"keys")).unwrap();
        for s in &tr.shares {
            assert_eq!(tr.verification.party_key(s.index).unwrap(), &params.group.exp(&s.value));
        }
        assert!(tr.complaints.is_empty());
        assert_eq!(tr.qualified.len(), 7);
    }

    #[test]
    fn corrupted_dealer_is_excluded() {
        let params = ThresholdParams::new(4, GroupParams::tiny()).unwrap();
        let e = entropy(4, b"fault");
        let tr = dkg_setup_with_faults(&params, &e, &[DealerFault { dealer: 2, recipient: 3 }]).unwrap();
        assert_eq!(tr.complaints, vec![Complaint { accuser: 3, dealer: 2 }]);
        assert_eq!(tr.qualified, vec![1, 3, 4]);
        let polys = dealer_polynomials(&params, &e).unwrap();
        let sk: BigUint = [0usize, 2, 3].iter().map(|&d| polys[d][0].clone()).sum::<BigUint>() % &params.group.q;
        assert_eq!(tr.verification.group_public_key, params.group.exp(&sk));
        let msg = b"after exclusion";
        let shares: Vec<_> = tr.shares.iter().map(|s| threshold_sign(&params.group, s, msg)).collect();
        let sig = threshold_recover(&params, &tr.verification, &shares, msg).unwrap();
        assert!(threshold_verify(&params.group, &sig, &tr.verification.group_public_key, msg));
    }

    #[test]
    fn entropy_count_checked() {
        let params = ThresholdParams::new(4, GroupParams::tiny()).unwrap();
        assert_eq!(
            dkg_setup(&params, &entropy(3, b"x")).unwrap_err(),
            CryptoError::EntropyMismatch { expected: 4, got: 3 }
        );
    }
}

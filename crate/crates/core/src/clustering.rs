// SPDX-License-Identifier: Apache-2.0

//! Epoch-start partition of collectors into clusters, transaction routing and
//! the Byzantine-cluster probability calculator.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{derive_seed, fisher_yates_shuffle, Digest, Seed, StakingKey};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("no collectors to assign")]
    NoCollectors,
    #[error("{clusters} clusters requested for only {collectors} collectors")]
    TooManyClusters { clusters: usize, collectors: usize },
    #[error("collector {0} listed twice")]
    DuplicateCollector(StakingKey),
    #[error("source of randomness is empty")]
    EmptyRandomness,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterAssignment {
    pub mapping: BTreeMap<StakingKey, usize>,
    pub clusters: usize,
    pub epoch: u64,
    /// Members of each cluster in shuffled order.
    pub members: Vec<Vec<StakingKey>>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, key: StakingKey) -> Option<usize> {
        self.mapping.get(&key).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// Shuffles the sorted collector list with a seed derived from `r`, fills
/// `c` clusters of `floor(n_c / c)` in shuffled order, then deals the
/// remaining `n_c mod c` collectors one each to clusters `0, 1, ...`.
pub fn cluster_assignment(
    collectors: &[StakingKey],
    c: usize,
    r: &[u8],
    epoch: u64,
) -> Result<ClusterAssignment, ClusterError> {
    if c == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if collectors.is_empty() {
        return Err(ClusterError::NoCollectors);
    }
    let n = collectors.len();
    if c > n {
        return Err(ClusterError::TooManyClusters { clusters: c, collectors: n });
    }
    let mut sorted = collectors.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(ClusterError::DuplicateCollector(w[0]));
    }

    let seed = derive_seed(&["collector", "cluster"], r).map_err(|_| ClusterError::EmptyRandomness)?;
    let pi = fisher_yates_shuffle(&seed, &sorted);

    let k = n / c;
    let mut cls = vec![0usize; n];
    let (mut i, mut j) = (0usize, 0usize);
    while j < c * k {
        cls[j] = i;
        j += 1;
        if j % k == 0 {
            i += 1;
        }
    }
    i = 0;
    while j < n {
        cls[j] = i;
        i += 1;
        j += 1;
    }

    let mut members = vec![Vec::new(); c];
    let mut mapping = BTreeMap::new();
    for (pos, key) in pi.iter().enumerate() {
        members[cls[pos]].push(*key);
        mapping.insert(*key, cls[pos]);
    }
    Ok(ClusterAssignment { mapping, clusters: c, epoch, members })
}

/// `h mod c` with the digest read as a 256-bit big-endian integer.
pub fn route_transaction(tx_hash: &Digest, c: usize) -> usize {
    crate::crypto::digest_mod(tx_hash, c as u64) as usize
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Smallest Byzantine member count that compromises a cluster:
/// `ceil(threshold * size)`.
pub fn compromise_count(cluster_size: u64, threshold: Ratio<u64>) -> u64 {
    let prod = Ratio::from_integer(cluster_size) * threshold;
    prod.ceil().to_integer()
}

/// Exact `P[X >= ceil(threshold * size)]` for `X` hypergeometric: Byzantine
/// members in a uniformly drawn cluster of `cluster_size` out of `n_c`
/// collectors, `byzantine` of them faulty.
pub fn cluster_compromise_probability(
    n_c: u64,
    byzantine: u64,
    cluster_size: u64,
    threshold: Ratio<u64>,
) -> Ratio<BigUint> {
    assert!(byzantine <= n_c && cluster_size <= n_c, "counts exceed population");
    let m = compromise_count(cluster_size, threshold);
    let total = binomial(n_c, cluster_size);
    let hi = byzantine.min(cluster_size);
    let mut favourable = BigUint::zero();
    let mut x = m;
    while x <= hi {
        favourable += binomial(byzantine, x) * binomial(n_c - byzantine, cluster_size - x);
        x += 1;
    }
    Ratio::new(favourable, total)
}

/// Nearest `f64` to a non-negative big rational, keeping 64 significant bits
/// through the division so tiny tails do not underflow to zero early.
pub fn ratio_to_f64(r: &Ratio<BigUint>) -> f64 {
    let (num, den) = (r.numer(), r.denom());
    if num.is_zero() {
        return 0.0;
    }
    let shift = den.bits() as i64 - num.bits() as i64 + 64;
    let q = if shift >= 0 { (num << shift as usize).div_floor(den) } else { num.div_floor(&(den << (-shift) as usize)) };
    q.to_f64().unwrap_or(f64::INFINITY) * 2f64.powi(-(shift as i32))
}

/// Monte Carlo estimate of the same tail, sampling clusters with a partial
/// Fisher-Yates draw from the seeded stream.
pub fn monte_carlo_compromise(
    n_c: u64,
    byzantine: u64,
    cluster_size: u64,
    threshold: Ratio<u64>,
    draws: u64,
    seed: &Seed,
) -> f64 {
    let m = compromise_count(cluster_size, threshold);
    let mut stream = seed.stream();
    let mut pool: Vec<bool> = (0..n_c).map(|i| i < byzantine).collect();
    let mut hits = 0u64;
    for _ in 0..draws {
        let mut bad = 0u64;
        for i in 0..cluster_size as usize {
            let j = i + stream.next_below(n_c - i as u64) as usize;
            pool.swap(i, j);
            bad += pool[i] as u64;
        }
        hits += (bad >= m) as u64;
    }
    hits as f64 / draws as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: u64) -> Vec<StakingKey> {
        (0..n).map(|i| StakingKey(1000 + i * 7)).collect()
    }

    #[test]
    fn seven_into_three() {
        let a = cluster_assignment(&keys(7), 3, b"rand", 0).unwrap();
        assert_eq!(a.sizes(), vec![3, 2, 2]);
    }

    #[test]
    fn sixteen_even_clusters() {
        let a = cluster_assignment(&keys(1040), 16, b"rand", 0).unwrap();
        assert!(a.sizes().iter().all(|&s| s == 65));
    }

    #[test]
    fn singletons_follow_shuffle() {
        let ks = keys(5);
        let a = cluster_assignment(&ks, 5, b"r", 0).unwrap();
        let seed = derive_seed(&["collector", "cluster"], b"r").unwrap();
        let pi = fisher_yates_shuffle(&seed, &ks);
        for (i, k) in pi.iter().enumerate() {
            assert_eq!(a.members[i], vec![*k]);
        }
    }

    #[test]
    fn input_order_irrelevant() {
        let mut ks = keys(30);
        let a = cluster_assignment(&ks, 4, b"r", 0).unwrap();
        ks.reverse();
        assert_eq!(a, cluster_assignment(&ks, 4, b"r", 0).unwrap());
    }

    #[test]
    fn errors() {
        assert_eq!(cluster_assignment(&keys(3), 0, b"r", 0), Err(ClusterError::ZeroClusters));
        assert_eq!(cluster_assignment(&[], 1, b"r", 0), Err(ClusterError::NoCollectors));
        let dup = vec![StakingKey(1), StakingKey(2), StakingKey(1)];
        assert_eq!(cluster_assignment(&dup, 1, b"r", 0), Err(ClusterError::DuplicateCollector(StakingKey(1))));
        assert!(matches!(cluster_assignment(&keys(2), 3, b"r", 0), Err(ClusterError::TooManyClusters { .. })));
    }

    #[test]
    fn routing() {
        let mut d = [0u8; 32];
        d[31] = 17;
        assert_eq!(route_transaction(&Digest(d), 5), 2);
        assert_eq!(route_transaction(&Digest::ZERO, 9), 0);
        // 2^8 mod 5 == 1
        let mut e = [0u8; 32];
        e[30] = 1;
        assert_eq!(route_transaction(&Digest(e), 5), 1);
    }

    #[test]
    fn hypergeometric_small_case() {
        let p = cluster_compromise_probability(6, 2, 3, Ratio::new(1, 3));
        assert_eq!(p, Ratio::new(BigUint::from(4u32), BigUint::from(5u32)));
        assert!(cluster_compromise_probability(50, 0, 10, Ratio::new(1, 3)).is_zero());
    }

    #[test]
    fn degenerate_full_draw() {
        // whole population drawn: probability is 1 iff byz/n >= threshold
        assert_eq!(ratio_to_f64(&cluster_compromise_probability(9, 3, 9, Ratio::new(1, 3))), 1.0);
        assert_eq!(ratio_to_f64(&cluster_compromise_probability(9, 2, 9, Ratio::new(1, 3))), 0.0);
    }

    #[test]
    fn f64_conversion_keeps_tiny_values() {
        let r = Ratio::new(BigUint::from(1u32), BigUint::from(10u32).pow(40));
        let v = ratio_to_f64(&r);
        assert!((v / 1e-40 - 1.0).abs() < 1e-12);
    }
}

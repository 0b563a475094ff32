// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::StateError;
use crate::crypto::StakingKey;

/// Stake-weighted member list of one voting group, sorted by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committee {
    members: Vec<(StakingKey, u64)>,
    total: u128,
}

impl Committee {
    pub fn new(mut members: Vec<(StakingKey, u64)>) -> Self {
        members.sort_by_key(|(k, _)| *k);
        members.dedup_by_key(|(k, _)| *k);
        let total = members.iter().map(|(_, s)| *s as u128).sum();
        Self { members, total }
    }

    pub fn members(&self) -> &[(StakingKey, u64)] {
        &self.members
    }

    pub fn keys(&self) -> impl Iterator<Item = StakingKey> + '_ {
        self.members.iter().map(|(k, _)| *k)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn total_stake(&self) -> u128 {
        self.total
    }

    pub fn index_of(&self, key: StakingKey) -> Option<usize> {
        self.members.binary_search_by_key(&key, |(k, _)| *k).ok()
    }

    pub fn contains(&self, key: StakingKey) -> bool {
        self.index_of(key).is_some()
    }

    pub fn stake_of(&self, key: StakingKey) -> Option<u64> {
        self.index_of(key).map(|i| self.members[i].1)
    }

    pub fn effective_votes<'a>(
        &self,
        voters: impl IntoIterator<Item = &'a StakingKey>,
    ) -> Result<Ratio<u128>, StateError> {
        if self.total == 0 {
            return Err(StateError::ZeroStakeGroup);
        }
        let distinct: BTreeSet<StakingKey> = voters.into_iter().copied().collect();
        let mut sum = 0u128;
        for v in distinct {
            sum += self.stake_of(v).ok_or(StateError::VoterNotInGroup(v))? as u128;
        }
        Ok(Ratio::new(sum, self.total))
    }

    /// True iff the distinct voters hold strictly more than 2/3 of the stake.
    pub fn is_supermajority<'a>(&self, voters: impl IntoIterator<Item = &'a StakingKey>) -> bool {
        self.effective_votes(voters).map(meets_supermajority).unwrap_or(false)
    }
}

pub fn effective_votes(
    voters: &BTreeSet<StakingKey>,
    group: &[(StakingKey, u64)],
) -> Result<Ratio<u128>, StateError> {
    Committee::new(group.to_vec()).effective_votes(voters)
}

/// Strict `> 2/3`.
pub fn meets_supermajority(fraction: Ratio<u128>) -> bool {
    fraction > Ratio::new(2, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(v: u64) -> StakingKey {
        StakingKey(v)
    }

    #[test]
    fn equal_stakes() {
        let group: Vec<_> = (1..=10).map(|i| (k(i), 1)).collect();
        let voters: BTreeSet<_> = (1..=7).map(k).collect();
        assert_eq!(effective_votes(&voters, &group).unwrap(), Ratio::new(7, 10));
    }

    #[test]
    fn weighted() {
        let group = vec![(k(1), 5), (k(2), 3), (k(3), 2)];
        let voters: BTreeSet<_> = [k(1), k(2)].into();
        assert_eq!(effective_votes(&voters, &group).unwrap(), Ratio::new(8, 10));
        let all: BTreeSet<_> = [k(1), k(2), k(3)].into();
        assert_eq!(effective_votes(&all, &group).unwrap(), Ratio::from_integer(1));
    }

    #[test]
    fn errors() {
        let zero = vec![(k(1), 0)];
        assert_eq!(effective_votes(&BTreeSet::new(), &zero), Err(StateError::ZeroStakeGroup));
        let group = vec![(k(1), 1)];
        let outsider: BTreeSet<_> = [k(9)].into();
        assert_eq!(effective_votes(&outsider, &group), Err(StateError::VoterNotInGroup(k(9))));
    }

    #[test]
    fn strict_threshold() {
        assert!(!meets_supermajority(Ratio::new(2, 3)));
        assert!(!meets_supermajority(Ratio::new(4, 6)));
        assert!(meets_supermajority(Ratio::new(7, 10)));
        assert!(!meets_supermajority(Ratio::new(0, 1)));
        for n in 1..200u128 {
            // 2/3 + 1/N
            assert!(meets_supermajority(Ratio::new(2, 3) + Ratio::new(1, n)));
        }
    }

    #[test]
    fn duplicate_voters_count_once() {
        let c = Committee::new((1..=10).map(|i| (k(i), 1)).collect());
        let votes = [k(1), k(1), k(2), k(3), k(4), k(5), k(6)];
        assert_eq!(c.effective_votes(votes.iter()).unwrap(), Ratio::new(6, 10));
        assert!(!c.is_supermajority(votes.iter()));
    }
}

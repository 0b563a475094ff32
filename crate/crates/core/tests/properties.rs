// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use flowpipe::clustering::cluster_assignment;
use flowpipe::crypto::{
    derive_seed, dkg_setup, fisher_yates_shuffle, hash, threshold_recover, threshold_sign, Digest, GroupParams, Seed,
    StakingKey, StakingKeyPair, ThresholdParams,
};
use flowpipe::execution::{
    chunk_boundaries, trace_fault_origin, verify_value_proof, ExecutionReceipt, ExecutionResult, ExecutionState,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shuffle_is_a_permutation(items in prop::collection::vec(any::<u32>(), 0..200), r in any::<[u8; 8]>()) {
        let seed = derive_seed(&["prop"], &r).unwrap();
        let mut a = fisher_yates_shuffle(&seed, &items);
        prop_assert_eq!(&a, &fisher_yates_shuffle(&seed, &items));
        let mut b = items.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clusters_balanced_and_complete(n in 1u64..300, c_frac in 0.0f64..1.0, r in any::<[u8; 4]>()) {
        let c = 1 + ((n - 1) as f64 * c_frac) as usize;
        let keys: Vec<StakingKey> = (0..n).map(|i| StakingKey(i * 31 + 5)).collect();
        let a = cluster_assignment(&keys, c, &r, 3).unwrap();
        let sizes = a.sizes();
        let k = n as usize / c;
        prop_assert!(sizes.iter().all(|&s| s == k || s == k + 1));
        prop_assert_eq!(sizes.iter().filter(|&&s| s == k + 1).count(), n as usize % c);
        prop_assert_eq!(a.mapping.len(), n as usize);
        for (i, m) in a.members.iter().enumerate() {
            prop_assert!(m.iter().all(|key| a.cluster_of(*key) == Some(i)));
        }
    }

    #[test]
    fn chunks_cover_and_respect_budget(costs in prop::collection::vec(0u64..300, 0..60), budget in 1u64..200) {
        let bounds = chunk_boundaries(&costs, budget);
        prop_assert!(!bounds.is_empty());
        prop_assert_eq!(bounds[0].start, 0);
        prop_assert_eq!(bounds.last().unwrap().end, costs.len());
        for w in bounds.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            // closing was forced: the next transaction would not fit
            prop_assert!(w[0].consumption + costs[w[1].start] > budget);
        }
        for b in &bounds {
            prop_assert_eq!(b.consumption, costs[b.start..b.end].iter().sum::<u64>());
            prop_assert!(b.consumption <= budget || b.end - b.start == 1);
        }
    }

    #[test]
    fn merkle_proofs_bind_values(
        regs in prop::collection::btree_map(prop::collection::vec(any::<u8>(), 1..6), prop::collection::vec(any::<u8>(), 0..6), 1..40),
        pick in any::<prop::sample::Index>(),
    ) {
        let state = ExecutionState::from_registers(regs.clone());
        let root = state.commitment();
        let (key, value) = regs.iter().nth(pick.index(regs.len())).unwrap();
        let proof = state.prove(key).unwrap();
        prop_assert!(verify_value_proof(key, value, &proof, &root));
        let mut other = value.clone();
        other.push(0xaa);
        prop_assert!(!verify_value_proof(key, &other, &proof, &root));
        let mut changed = regs.clone();
        changed.insert(key.clone(), other);
        prop_assert_ne!(ExecutionState::from_registers(changed).commitment(), root);
    }

    #[test]
    fn fault_origin_is_first_faulty_receipt(len in 1usize..30, first in 0usize..30, executors in 1u64..5) {
        let first = first % len;
        let kps: Vec<StakingKeyPair> = (0..executors).map(|i| StakingKeyPair::from_seed(&i.to_be_bytes())).collect();
        let mut receipts: Vec<ExecutionReceipt> = Vec::new();
        let mut prev = hash(b"genesis-result", b"");
        for h in 0..len {
            let result = ExecutionResult {
                block_hash: hash(b"block", &h.to_be_bytes()),
                previous_result_hash: prev,
                chunks: Vec::new(),
                final_state: hash(b"state", &[(h >= first) as u8, h as u8]),
            };
            let r = ExecutionReceipt::sign(result, Vec::new(), &kps[h % kps.len()]);
            prev = r.result.hash();
            receipts.push(r);
        }
        let by_hash: HashMap<Digest, &ExecutionReceipt> = receipts.iter().map(|r| (r.result.hash(), r)).collect();
        let faulty = |r: &ExecutionReceipt| receipts.iter().position(|x| x == r).is_some_and(|i| i >= first);
        let origin = trace_fault_origin(receipts.last().unwrap(), |h| by_hash.get(h).copied(), faulty);
        prop_assert_eq!(origin, Ok(kps[first % kps.len()].public()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_quorum_of_shares_recovers_one_signature(n_s in 3usize..10, picks in prop::collection::vec(any::<prop::sample::Index>(), 2), msg in any::<[u8; 12]>()) {
        let params = ThresholdParams::new(n_s, GroupParams::tiny()).unwrap();
        let entropy: Vec<Seed> = (0..n_s).map(|i| derive_seed(&["prop-dkg"], &[i as u8, n_s as u8]).unwrap()).collect();
        let dkg = dkg_setup(&params, &entropy).unwrap();
        let shares: Vec<_> = dkg.shares.iter().map(|s| threshold_sign(&params.group, s, &msg)).collect();
        let mut sigs = BTreeMap::new();
        for (n, pick) in picks.iter().enumerate() {
            // rotate the share list so each pick draws a different (t+1)-window
            let start = pick.index(n_s);
            let subset: Vec<_> = (0..params.required_shares()).map(|k| shares[(start + k) % n_s].clone()).collect();
            let sig = threshold_recover(&params, &dkg.verification, &subset, &msg).unwrap();
            sigs.insert(n, sig.value);
        }
        prop_assert_eq!(&sigs[&0], &sigs[&1]);
    }
}

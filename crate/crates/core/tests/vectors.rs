// SPDX-License-Identifier: Apache-2.0

//! Checks against the frozen reference values in `vectors/`, produced by
//! `tools/gen_vectors.py`.

use std::fs;
use std::path::PathBuf;

use flowpipe::clustering::cluster_assignment;
use flowpipe::crypto::{derive_seed, fisher_yates_shuffle, StakingKey};
use flowpipe::execution::chunk_boundaries;
use flowpipe::state::{Epoch, NodeIdentity, ProtocolState, Role};

fn lines(file: &str) -> Vec<String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../vectors").join(file);
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

#[test]
fn seed_derivation_and_stream_words() {
    let cases = lines("stream.txt");
    assert_eq!(cases.len(), 3);
    for l in cases {
        let f: Vec<&str> = l.split(' ').collect();
        let tags: Vec<&str> = f[0].split(',').collect();
        let seed = derive_seed(&tags, &hex::decode(f[1]).unwrap()).unwrap();
        assert_eq!(seed.0.to_hex(), f[2], "seed for {tags:?}");
        let words: Vec<String> = seed.stream().take(4).map(|w| w.to_string()).collect();
        assert_eq!(words, f[3..7], "stream for {tags:?}");
    }
}

#[test]
fn fisher_yates_matches_reference() {
    for l in lines("shuffle.txt") {
        let f: Vec<&str> = l.split_whitespace().collect();
        let n: u32 = f[1].parse().unwrap();
        let seed = derive_seed(&["shuffle-test"], &hex::decode(f[0]).unwrap()).unwrap();
        let got: Vec<String> = fisher_yates_shuffle(&seed, &(0..n).collect::<Vec<_>>()).iter().map(u32::to_string).collect();
        assert_eq!(got, f[2..], "n = {n}");
    }
}

#[test]
fn cluster_members_match_reference() {
    let all = lines("clusters.txt");
    let mut it = all.iter();
    let mut cases = 0;
    while let Some(head) = it.next() {
        let (n, c) = head.split_once(' ').unwrap();
        let (n, c): (u64, usize) = (n.parse().unwrap(), c.parse().unwrap());
        let keys: Vec<StakingKey> = (0..n).map(|i| StakingKey(1000 + 7 * i)).collect();
        let a = cluster_assignment(&keys, c, b"rand", 0).unwrap();
        for (i, members) in a.members.iter().enumerate() {
            let want: Vec<u64> = it.next().unwrap().split_whitespace().map(|x| x.parse().unwrap()).collect();
            assert_eq!(members.iter().map(|k| k.0).collect::<Vec<_>>(), want, "n={n} c={c} cluster {i}");
        }
        cases += 1;
    }
    assert_eq!(cases, 4);
}

#[test]
fn chunk_boundaries_match_reference() {
    let all = lines("chunks.txt");
    assert!(all.len() > 60);
    for l in all {
        let parts: Vec<&str> = l.split('|').map(str::trim).collect();
        let budget: u64 = parts[0].parse().unwrap();
        let costs: Vec<u64> = parts[1].split_whitespace().map(|x| x.parse().unwrap()).collect();
        let got: Vec<String> =
            chunk_boundaries(&costs, budget).iter().map(|b| format!("{}:{}:{}", b.start, b.end, b.consumption)).collect();
        assert_eq!(got.join(" "), parts[2], "budget {budget} costs {costs:?}");
    }
}

#[test]
fn state_commitment_matches_reference() {
    let all = lines("state.txt");
    assert_eq!(all.len(), 3);
    for l in all {
        let parts: Vec<&str> = l.split('|').map(str::trim).collect();
        let e: Vec<u64> = parts[0].split(',').map(|x| x.parse().unwrap()).collect();
        let nodes = parts[1]
            .split_whitespace()
            .map(|n| {
                let f: Vec<u64> = n.split(':').map(|x| x.parse().unwrap()).collect();
                NodeIdentity::genesis(StakingKey(f[0]), Role::ALL[f[1] as usize], f[2], f[3] as u32)
            })
            .collect();
        let state = ProtocolState::genesis(Epoch::new(e[0], e[1], e[2], e[3]).unwrap(), nodes).unwrap();
        assert_eq!(state.commitment().to_hex(), parts[2], "{l}");
    }
}

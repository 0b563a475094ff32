// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use num_rational::Ratio;

use flowpipe::clustering::{cluster_assignment, cluster_compromise_probability};
use flowpipe::crypto::{
    derive_seed, dkg_setup, hash, threshold_recover, threshold_sign, GroupParams, Seed, StakingKey, StakingKeyPair,
    ThresholdParams,
};
use flowpipe::execution::{block_execution, chunk_boundaries, ExecutionState};
use flowpipe::scenario::Scenario;
use flowpipe::transaction::{Op, Script, ScriptOp, SignedTransaction};

fn clustering(c: &mut Criterion) {
    let keys: Vec<StakingKey> = (0..1040).map(|i| StakingKey(i * 7 + 1)).collect();
    c.bench_function("cluster_assignment/1040x16", |b| {
        b.iter(|| cluster_assignment(black_box(&keys), 16, b"bench", 0).unwrap())
    });
    let mut g = c.benchmark_group("compromise_probability");
    for size in [50u64, 80] {
        g.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, &s| {
            b.iter(|| cluster_compromise_probability(1040, 346, s, Ratio::new(1, 3)))
        });
    }
    g.finish();
}

fn threshold(c: &mut Criterion) {
    let mut g = c.benchmark_group("threshold_recover");
    for (name, group) in [("tiny", GroupParams::tiny()), ("large", GroupParams::large())] {
        let params = ThresholdParams::new(7, group).unwrap();
        let entropy: Vec<Seed> = (0..7u8).map(|i| derive_seed(&["bench"], &[i]).unwrap()).collect();
        let dkg = dkg_setup(&params, &entropy).unwrap();
        let msg = hash(b"protoblock", b"bench");
        let shares: Vec<_> = dkg.shares.iter().map(|s| threshold_sign(&params.group, s, msg.as_bytes())).collect();
        g.bench_function(name, |b| {
            b.iter(|| threshold_recover(&params, &dkg.verification, black_box(&shares[..4]), msg.as_bytes()).unwrap())
        });
    }
    g.finish();
}

fn execution(c: &mut Criterion) {
    let costs: Vec<u64> = (0..10_000u64).map(|i| (i * 2_654_435_761) % 97 + 1).collect();
    c.bench_function("chunk_boundaries/10k", |b| b.iter(|| chunk_boundaries(black_box(&costs), 500)));

    let kp = StakingKeyPair::from_seed(b"bench-exec");
    let txs: Vec<SignedTransaction> = (0..200u32)
        .map(|i| {
            let op = ScriptOp { op: Op::SetRegister { key: (i % 50).to_be_bytes().to_vec(), value: vec![i as u8] }, cost: 1 + i % 20 };
            SignedTransaction::sign(&Script::new(vec![op]), hash(b"ref", b""), &kp, &[&kp])
        })
        .collect();
    let refs: Vec<&SignedTransaction> = txs.iter().collect();
    c.bench_function("block_execution/200tx", |b| {
        b.iter_batched(
            ExecutionState::new,
            |s| block_execution(hash(b"block", b"1"), hash(b"prev", b""), s, &refs, 100, &kp, None),
            BatchSize::SmallInput,
        )
    });
}

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    let text = flowpipe::scenario::bundled_source("happy-path").unwrap();
    let s = Scenario::from_json_with(text, &["drb.group=tiny".into(), "run.max_sim_time=5000".into()]).unwrap();
    g.bench_function("happy_path/5000_ticks", |b| b.iter(|| flowpipe::sim::run(s.clone()).unwrap()));
    g.finish();
}

criterion_group!(benches, clustering, threshold, execution, simulation);
criterion_main!(benches);

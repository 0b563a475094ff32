// SPDX-License-Identifier: Apache-2.0

use flowpipe::scenario::{Scenario, ScenarioError};
use flowpipe::sim::{self, EventLog};

fn tiny(name: &str, extra: &[&str]) -> Scenario {
    let mut o = vec!["drb.group=tiny".to_string()];
    o.extend(extra.iter().map(|s| s.to_string()));
    Scenario::from_json_with(flowpipe::scenario::bundled_source(name).unwrap(), &o).unwrap()
}

#[test]
fn crashed_consensus_minority_keeps_chain_consistent() {
    let mut s = tiny("happy-path", &["run.max_sim_time=15000", "expect.min_finalized=5", "expect.min_sealed=0"]);
    s.adversary = serde_json::from_str(r#"[{ "behavior": "non_responsive", "node": "consensus-4" },
                                           { "behavior": "non_responsive", "node": "consensus-6" }]"#)
        .unwrap();
    let out = sim::run(s).unwrap();
    assert!(out.report.passed(), "{}", out.report);
}

#[test]
fn partition_stalls_then_heals() {
    let out = sim::run(tiny("network-partition", &[])).unwrap();
    let p = out.report.get("partition_0_no_progress").expect("partition evaluated");
    assert!(p.pass, "{}", p.detail);
    let after: Vec<_> = out.log.records.iter().filter(|r| r.kind == "finalized" && r.t > 12_000).collect();
    assert!(!after.is_empty(), "no finalization after the partition heals");
}

#[test]
fn event_log_roundtrips_and_is_time_ordered() {
    let out = sim::run(tiny("withheld-collection", &["run.max_sim_time=6000", "expect.min_finalized=1", "expect.min_sealed=0", "expect.min_slashes=0"])).unwrap();
    assert!(out.log.is_ordered());
    let text = out.log.to_jsonl();
    let back = EventLog::from_jsonl(&text).unwrap();
    assert_eq!(back.records, out.log.records);
    assert_eq!(back.digest(), out.log.digest());
    assert!(out.log.count("withhold_collection") >= 1);
}

#[test]
fn seed_changes_the_run_but_not_its_verdict() {
    let a = sim::run(tiny("happy-path", &["run.max_sim_time=5000", "expect.min_sealed=0", "expect.min_finalized=5"])).unwrap();
    let b = sim::run(tiny("happy-path", &["run.max_sim_time=5000", "expect.min_sealed=0", "expect.min_finalized=5", "run.seed=2"])).unwrap();
    assert_ne!(a.log.digest(), b.log.digest());
    assert!(a.report.passed() && b.report.passed());
}

#[test]
fn metrics_render_in_both_formats() {
    let out = sim::run(tiny("happy-path", &["run.max_sim_time=4000", "expect.min_sealed=0"])).unwrap();
    let csv = out.metrics.to_csv();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains(&format!("blocks_finalized,{}", out.metrics.blocks_finalized)));
    let rows: Vec<serde_json::Value> = out.metrics.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), csv.lines().count() - 1);
}

#[test]
fn malformed_scenarios_are_rejected() {
    let text = flowpipe::scenario::bundled_source("happy-path").unwrap();
    let cases: [(&str, &[&str]); 5] = [
        ("{ \"nme\": 1 }", &[]),
        (text, &["drb.n_s=40"]),
        (text, &["network.drop=1.5"]),
        (text, &["nosuch"]),
        (r#"{ "adversary": [{ "behavior": "faulty_execution", "node": "consensus-0", "chunk": 0 }] }"#, &[]),
    ];
    for (t, o) in cases {
        let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
        let err = Scenario::from_json_with(t, &o).unwrap_err();
        assert!(
            matches!(err, ScenarioError::Parse(_) | ScenarioError::Invalid(_) | ScenarioError::BadOverride(_) | ScenarioError::OverridePath { .. }),
            "{err}"
        );
    }
}

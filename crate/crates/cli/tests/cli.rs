// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowpipe(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowpipe"));
    cmd.args(args).env_remove("FLOWPIPE_OUT");
    if let Some(d) = env_out {
        cmd.env("FLOWPIPE_OUT", d);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICK: [&str; 4] = ["--override", "drb.group=tiny", "--override", "run.max_sim_time=4000"];

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["run", "--scenario", "happy-path", "--seed", "3", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    args.extend(["--override", "expect.min_finalized=5", "--override", "expect.min_sealed=0"]);
    let o = flowpipe(&args, None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for f in ["events.jsonl", "metrics.csv", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert!(stdout(&o).contains("ok   safety"));
}

#[test]
fn failed_property_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--scenario", "happy-path", "--out", dir.path().to_str().unwrap()];
    args.extend(QUICK);
    args.extend(["--override", "expect.min_finalized=100000"]);
    let o = flowpipe(&args, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL liveness"));
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn configuration_errors_exit_two_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"roles\": { \"consensus\": { \"count\": 0 } } }").unwrap();
    let out = dir.path().join("never");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--scenario", bad.to_str().unwrap(), "--out", out.to_str().unwrap()],
        vec!["run", "--scenario", "no-such-scenario", "--out", out.to_str().unwrap()],
        vec!["run", "--scenario", "happy-path", "--override", "network.drop", "--out", out.to_str().unwrap()],
        vec!["run", "--scenario", "happy-path", "--override", "network.nope=1", "--out", out.to_str().unwrap()],
    ];
    for args in cases {
        let o = flowpipe(&args, None);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{args:?} created output");
    }
    fs::write(&bad, "not json").unwrap();
    assert_eq!(flowpipe(&["run", "--scenario", bad.to_str().unwrap()], Some(&out)).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn env_var_sets_output_dir_and_jsonl_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--scenario", "pre-gst-chaos", "--format", "jsonl"];
    args.extend(QUICK);
    let o = flowpipe(&args, Some(dir.path()));
    assert!(o.status.code().is_some_and(|c| c < 2));
    assert!(dir.path().join("metrics.jsonl").is_file());
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn verify_trace_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--scenario", "equivocating-leader", "--out", dir.path().to_str().unwrap()];
    args.extend(QUICK);
    flowpipe(&args, None);
    let events = dir.path().join("events.jsonl");
    let mut v = vec!["verify-trace", "--scenario", "equivocating-leader", "--events", events.to_str().unwrap()];
    v.extend(QUICK);
    let o = flowpipe(&v, None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("identical"));

    let text = fs::read_to_string(&events).unwrap();
    let tampered: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(&events, tampered).unwrap();
    let o = flowpipe(&v, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first difference"));
}

#[test]
fn scenarios_lists_bundled() {
    let o = flowpipe(&["scenarios"], None);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    for name in ["happy-path", "byzantine-executor", "withheld-collection", "equivocating-leader", "network-partition", "pre-gst-chaos"] {
        assert!(s.contains(name), "{name}");
    }
}

#[test]
fn analyze_clusters_prints_csv() {
    let o = flowpipe(&["analyze-clusters", "--min-size", "50", "--max-size", "80", "--step", "30", "--monte-carlo", "2000"], None);
    assert_eq!(o.status.code(), Some(0));
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["n_c", "byz", "size", "threshold", "probability", "monte_carlo"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][2], "80");
    let p: f64 = rows[0][4].parse().unwrap();
    assert!((p - 0.510_249_052_214_681_6).abs() < 1e-12);

    assert_eq!(flowpipe(&["analyze-clusters", "--threshold", "2"], None).status.code(), Some(2));
}

#[test]
fn dkg_demo_recovers_and_verifies() {
    let o = flowpipe(&["dkg-demo", "--n-s", "7"], None);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("n_s = 7, t = 3"));
    assert!(s.contains("verify = true"));
    assert_eq!(s.lines().filter(|l| l.starts_with("share ")).count(), 7);
    assert_eq!(flowpipe(&["dkg-demo", "--n-s", "0"], None).status.code(), Some(2));
}

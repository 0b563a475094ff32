// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use num_rational::Ratio;

use flowpipe::clustering::{cluster_compromise_probability, monte_carlo_compromise, ratio_to_f64};
use flowpipe::crypto::{
    compute_threshold_t, derive_seed, dkg_setup, threshold_recover, threshold_sign, threshold_verify, GroupParams,
    Seed, ThresholdParams,
};
use flowpipe::scenario::{bundled_source, Scenario, ScenarioError, BUNDLED};
use flowpipe::sim::{self, EventLog};

#[derive(Parser)]
#[command(name = "flowpipe", version, about = "Pipelined proof-of-stake blockchain simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Tiny,
    Large,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write the event log, metrics and property report.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = "FLOWPIPE_OUT", default_value = "flowpipe-out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// List the bundled scenarios.
    Scenarios,
    /// Probability that a randomly drawn cluster is compromised.
    AnalyzeClusters {
        #[arg(long, default_value_t = 1040)]
        n_c: u64,
        #[arg(long, default_value_t = 346)]
        byzantine: u64,
        #[arg(long, default_value_t = 50)]
        min_size: u64,
        #[arg(long, default_value_t = 80)]
        max_size: u64,
        #[arg(long, default_value_t = 1)]
        step: u64,
        /// Fraction of a cluster that must be Byzantine, as `num/den`.
        #[arg(long, default_value = "1/3")]
        threshold: String,
        /// Monte Carlo draws per row for a cross-check column; 0 disables it.
        #[arg(long, default_value_t = 0)]
        monte_carlo: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Distributed key generation plus one beacon round.
    DkgDemo {
        #[arg(long, default_value_t = 7)]
        n_s: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "tiny")]
        group: Group,
    },
    /// Replay a scenario and compare against a recorded event log.
    VerifyTrace {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        events: PathBuf,
    },
}

fn load(scenario: &str, seed: Option<u64>, overrides: &[String]) -> Result<Scenario, String> {
    let text = if Path::new(scenario).is_file() {
        fs::read_to_string(scenario).map_err(|e| format!("{scenario}: {e}"))?
    } else if let Some(t) = bundled_source(scenario) {
        t.to_string()
    } else {
        return Err(format!("{scenario}: no such file or bundled scenario"));
    };
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("run.seed={s}"));
    }
    Scenario::from_json_with(&text, &all).map_err(|e: ScenarioError| format!("{scenario}: {e}"))
}

fn cmd_run(scenario: &str, seed: Option<u64>, overrides: &[String], out: &Path, format: Format) -> ExitCode {
    let s = match load(scenario, seed, overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match sim::run(s) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let written = fs::create_dir_all(out).and_then(|_| {
        fs::write(out.join("events.jsonl"), result.log.to_jsonl())?;
        match format {
            Format::Csv => fs::write(out.join("metrics.csv"), result.metrics.to_csv())?,
            Format::Jsonl => fs::write(out.join("metrics.jsonl"), result.metrics.to_jsonl())?,
        }
        fs::write(out.join("report.json"), result.report.to_json())
    });
    if let Err(e) = written {
        eprintln!("error: writing to {}: {e}", out.display());
        return ExitCode::from(2);
    }
    print!("{}", result.report);
    println!(
        "finalized {} sealed {} slashes {} events {} -> {}",
        result.metrics.blocks_finalized,
        result.metrics.blocks_sealed,
        result.metrics.slashes,
        result.log.records.len(),
        out.display()
    );
    if result.report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn parse_ratio(s: &str) -> Option<Ratio<u64>> {
    let (n, d) = s.split_once('/')?;
    let (n, d) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
    (d > 0 && n <= d).then(|| Ratio::new(n, d))
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(n_c: u64, byz: u64, min: u64, max: u64, step: u64, threshold: &str, mc: u64, seed: u64) -> ExitCode {
    let Some(th) = parse_ratio(threshold) else {
        eprintln!("error: threshold must look like 1/3");
        return ExitCode::from(2);
    };
    if byz > n_c || max > n_c || min == 0 || min > max || step == 0 {
        eprintln!("error: need 0 < min-size <= max-size <= n-c, byzantine <= n-c, step > 0");
        return ExitCode::from(2);
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let mut header = vec!["n_c", "byz", "size", "threshold", "probability"];
    if mc > 0 {
        header.push("monte_carlo");
    }
    w.write_record(&header).expect("stdout");
    let mut size = min;
    while size <= max {
        let p = ratio_to_f64(&cluster_compromise_probability(n_c, byz, size, th));
        let mut row = vec![n_c.to_string(), byz.to_string(), size.to_string(), th.to_string(), format!("{p:e}")];
        if mc > 0 {
            let s = derive_seed(&["analyze-clusters", &size.to_string()], &seed.to_be_bytes()).expect("tags");
            row.push(format!("{:e}", monte_carlo_compromise(n_c, byz, size, th, mc, &s)));
        }
        w.write_record(&row).expect("stdout");
        size += step;
    }
    w.flush().expect("stdout");
    ExitCode::SUCCESS
}

fn cmd_dkg(n_s: usize, seed: u64, group: Group) -> ExitCode {
    let group = match group {
        Group::Tiny => GroupParams::tiny(),
        Group::Large => GroupParams::large(),
    };
    let params = match ThresholdParams::new(n_s, group) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let t = compute_threshold_t(n_s).expect("n_s validated above");
    let entropy: Vec<Seed> =
        (0..n_s).map(|i| derive_seed(&["dkg-demo", &i.to_string()], &seed.to_be_bytes()).expect("tags")).collect();
    let dkg = dkg_setup(&params, &entropy).expect("honest dealers");
    println!("n_s = {n_s}, t = {t}, shares needed = {}", params.required_shares());
    println!("p = {}", params.group.p);
    println!("q = {}", params.group.q);
    println!("group public key = {}", dkg.verification.group_public_key);
    for s in &dkg.shares {
        println!("share {} = {}", s.index, s.value);
    }
    let msg = b"flowpipe beacon demo";
    let sig_shares: Vec<_> = dkg.shares.iter().map(|s| threshold_sign(&params.group, s, msg)).collect();
    let sigma = threshold_recover(&params, &dkg.verification, &sig_shares[..params.required_shares()], msg)
        .expect("enough valid shares");
    let ok = threshold_verify(&params.group, &sigma, &dkg.verification.group_public_key, msg);
    println!("sigma = {}", sigma.value);
    println!("randomness = {}", sigma.digest().to_hex());
    println!("verify = {ok}");
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_verify_trace(scenario: &str, seed: Option<u64>, overrides: &[String], events: &Path) -> ExitCode {
    let s = match load(scenario, seed, overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let recorded = match fs::read_to_string(events).map_err(|e| e.to_string()).and_then(|t| EventLog::from_jsonl(&t).map_err(|e| e.to_string())) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {}: {e}", events.display());
            return ExitCode::from(2);
        }
    };
    let replay = match sim::run(s) {
        Ok(r) => r.log,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match recorded.records.iter().zip(&replay.records).position(|(a, b)| a != b) {
        None if recorded.records.len() == replay.records.len() => {
            println!("identical: {} events, digest {}", replay.records.len(), replay.digest().to_hex());
            ExitCode::SUCCESS
        }
        None => {
            println!("length differs: recorded {}, replayed {}", recorded.records.len(), replay.records.len());
            ExitCode::from(1)
        }
        Some(i) => {
            println!("first difference at record {i}");
            println!("  recorded: {}", serde_json::to_string(&recorded.records[i]).unwrap_or_default());
            println!("  replayed: {}", serde_json::to_string(&replay.records[i]).unwrap_or_default());
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, overrides, out, format } => cmd_run(&scenario, seed, &overrides, &out, format),
        Cmd::Scenarios => {
            for (name, text) in BUNDLED {
                let desc = Scenario::from_json(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<22} {desc}");
            }
            ExitCode::SUCCESS
        }
        Cmd::AnalyzeClusters { n_c, byzantine, min_size, max_size, step, threshold, monte_carlo, seed } => {
            cmd_analyze(n_c, byzantine, min_size, max_size, step, &threshold, monte_carlo, seed)
        }
        Cmd::DkgDemo { n_s, seed, group } => cmd_dkg(n_s, seed, group),
        Cmd::VerifyTrace { scenario, seed, overrides, events } => cmd_verify_trace(&scenario, seed, &overrides, &events),
    }
}

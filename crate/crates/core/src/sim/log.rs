// SPDX-License-Identifier: Apache-2.0

//! JSON-lines event log and the run metrics.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::crypto::{hash, Digest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: u64,
    pub node: String,
    pub kind: String,
    /// First 16 hex digits of the payload digest.
    pub digest: String,
    #[serde(flatten)]
    pub detail: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, t: u64, node: &str, kind: &str, digest: &Digest, detail: Value) {
        let detail = match detail {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => Map::from_iter([("value".to_string(), other)]),
        };
        self.records.push(LogRecord {
            t,
            node: node.to_string(),
            kind: kind.to_string(),
            digest: digest.short(),
            detail,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn digest(&self) -> Digest {
        hash(b"event-log", self.to_jsonl().as_bytes())
    }

    pub fn count(&self, kind: &str) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    /// Records are in nondecreasing time order.
    pub fn is_ordered(&self) -> bool {
        self.records.windows(2).all(|w| w[0].t <= w[1].t)
    }
}

/// Upper bucket edges of the transaction latency histogram, in ticks.
pub const LATENCY_EDGES: [u64; 7] = [500, 1000, 2000, 4000, 8000, 16000, u64::MAX];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub sim_time: u64,
    pub blocks_finalized: u64,
    pub blocks_sealed: u64,
    pub collections_guaranteed: u64,
    pub challenges: u64,
    pub slashes: u64,
    pub stake_slashed: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub transactions_submitted: u64,
    pub transactions_finalized: u64,
    /// Counts per bucket of [`LATENCY_EDGES`].
    pub latency_histogram: Vec<u64>,
}

impl Metrics {
    pub fn record_latencies(&mut self, latencies: &[u64]) {
        self.latency_histogram = vec![0; LATENCY_EDGES.len()];
        for &l in latencies {
            let i = LATENCY_EDGES.iter().position(|e| l <= *e).expect("last edge is unbounded");
            self.latency_histogram[i] += 1;
        }
        self.transactions_finalized = latencies.len() as u64;
    }

    fn rows(&self) -> Vec<(String, u64)> {
        let mut rows = vec![
            ("sim_time".to_string(), self.sim_time),
            ("blocks_finalized".into(), self.blocks_finalized),
            ("blocks_sealed".into(), self.blocks_sealed),
            ("collections_guaranteed".into(), self.collections_guaranteed),
            ("challenges".into(), self.challenges),
            ("slashes".into(), self.slashes),
            ("stake_slashed".into(), self.stake_slashed),
            ("messages_sent".into(), self.messages_sent),
            ("messages_dropped".into(), self.messages_dropped),
            ("transactions_submitted".into(), self.transactions_submitted),
            ("transactions_finalized".into(), self.transactions_finalized),
        ];
        for (edge, n) in LATENCY_EDGES.iter().zip(&self.latency_histogram) {
            let label = if *edge == u64::MAX { "latency_le_inf".to_string() } else { format!("latency_le_{edge}") };
            rows.push((label, *n));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"]).expect("in-memory write");
        for (k, v) in self.rows() {
            w.write_record([k, v.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_jsonl(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(k, v)| serde_json::json!({ "metric": k, "value": v }).to_string() + "\n")
            .collect()
    }
}

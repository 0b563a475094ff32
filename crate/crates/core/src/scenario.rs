// SPDX-License-Identifier: Apache-2.0

//! Scenario files: the JSON configuration tree a simulation run is built from.
//!
//! Every section rejects unknown keys. Missing sections and fields take the
//! defaults below, so `{}` is a valid (honest, small) scenario.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::state::SlashPolicy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("override `{key}`: {reason}")]
    OverridePath { key: String, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleSpec {
    pub count: usize,
    pub stake: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Roles {
    pub consensus: RoleSpec,
    pub collectors: RoleSpec,
    pub executors: RoleSpec,
    pub verifiers: RoleSpec,
    pub clients: usize,
}

impl Default for Roles {
    fn default() -> Self {
        Self {
            consensus: RoleSpec { count: 7, stake: 100 },
            collectors: RoleSpec { count: 8, stake: 100 },
            executors: RoleSpec { count: 3, stake: 1000 },
            verifiers: RoleSpec { count: 4, stake: 100 },
            clients: 1,
        }
    }
}

impl Default for RoleSpec {
    fn default() -> Self {
        Self { count: 1, stake: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Clusters {
    pub count: usize,
    /// Transactions per collection before the leader closes it.
    pub collection_threshold: usize,
    /// Ticks an open collection may wait before it is closed anyway.
    pub collection_timespan: u64,
}

impl Default for Clusters {
    fn default() -> Self {
        Self { count: 2, collection_threshold: 20, collection_timespan: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusSection {
    pub base_timeout: u64,
    pub proposal_delay: u64,
    pub max_doublings: u32,
    pub max_collections_per_block: usize,
    pub max_seals_per_block: usize,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self { base_timeout: 1000, proposal_delay: 20, max_doublings: 6, max_collections_per_block: 16, max_seals_per_block: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupChoice {
    /// 2q+1 = 2039; fast, no security.
    Tiny,
    /// 256-bit safe prime.
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrbSection {
    /// Committee size; the lowest-keyed consensus nodes serve.
    pub n_s: usize,
    pub group: GroupChoice,
}

impl Default for DrbSection {
    fn default() -> Self {
        Self { n_s: 7, group: GroupChoice::Large }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionSection {
    pub chunk_budget: u64,
    /// Ticks between client transactions, per client.
    pub tx_interval: u64,
    /// Declared cost of a client transaction is drawn from 1..=tx_cost_max.
    pub tx_cost_max: u64,
    /// Registers the workload writes to.
    pub tx_key_space: u64,
    /// Clients stop submitting at this time; `None` runs to the end.
    pub tx_until: Option<u64>,
    /// Expiry window in blocks.
    pub tx_window: u64,
    /// Ticks an executor waits for one guarantor.
    pub retrieval_timeout: u64,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            chunk_budget: 40,
            tx_interval: 25,
            tx_cost_max: 5,
            tx_key_space: 64,
            tx_until: None,
            tx_window: 600,
            retrieval_timeout: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationSection {
    /// Per-chunk assignment probability `p`.
    pub coverage: f64,
    /// Blocks a missing-collection challenge waits for an answer.
    pub mcc_deadline_blocks: u64,
    pub slash_policy: SlashPolicy,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self { coverage: 0.5, mcc_deadline_blocks: 10, slash_policy: SlashPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    /// Node names per side. Unlisted nodes form one more side together.
    pub groups: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub delta_t: u64,
    pub phi_t: f64,
    pub gst: u64,
    pub drop: f64,
    /// Pre-GST delays are drawn from (0, factor * delta_t].
    pub pre_gst_delay_factor: u64,
    pub partitions: Vec<Partition>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { delta_t: 100, phi_t: 1.2, gst: 0, drop: 0.0, pre_gst_delay_factor: 5, partitions: vec![] }
    }
}

fn forever() -> u64 {
    u64::MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    /// Collectors of `cluster` holding just over 2/3 of its stake collude:
    /// `count` times they guarantee a collection among themselves and never
    /// hand it out.
    WithholdCollection {
        cluster: usize,
        #[serde(default = "one")]
        count: u32,
        #[serde(default)]
        start: u64,
        #[serde(default = "default_interval")]
        interval: u64,
    },
    EquivocateProposal {
        node: String,
        #[serde(default)]
        start: u64,
        #[serde(default = "forever")]
        end: u64,
    },
    FaultyExecution {
        node: String,
        #[serde(default)]
        chunk: usize,
        #[serde(default)]
        start: u64,
        #[serde(default = "forever")]
        end: u64,
    },
    NonResponsive {
        node: String,
        #[serde(default)]
        start: u64,
        #[serde(default = "forever")]
        end: u64,
    },
    StaleVote {
        node: String,
        #[serde(default)]
        start: u64,
        #[serde(default = "forever")]
        end: u64,
    },
}

fn one() -> u32 {
    1
}

fn default_interval() -> u64 {
    2000
}

impl AdversarySpec {
    pub fn name(&self) -> &'static str {
        match self {
            AdversarySpec::WithholdCollection { .. } => "withhold_collection",
            AdversarySpec::EquivocateProposal { .. } => "equivocate_proposal",
            AdversarySpec::FaultyExecution { .. } => "faulty_execution",
            AdversarySpec::NonResponsive { .. } => "non_responsive",
            AdversarySpec::StaleVote { .. } => "stale_vote",
        }
    }

    /// Node the behavior is pinned to, if it is pinned to one.
    pub fn node(&self) -> Option<&str> {
        match self {
            AdversarySpec::WithholdCollection { .. } => None,
            AdversarySpec::EquivocateProposal { node, .. }
            | AdversarySpec::FaultyExecution { node, .. }
            | AdversarySpec::NonResponsive { node, .. }
            | AdversarySpec::StaleVote { node, .. } => Some(node),
        }
    }

    pub fn active_at(&self, t: u64) -> bool {
        match self {
            AdversarySpec::WithholdCollection { start, .. } => t >= *start,
            AdversarySpec::EquivocateProposal { start, end, .. }
            | AdversarySpec::FaultyExecution { start, end, .. }
            | AdversarySpec::NonResponsive { start, end, .. }
            | AdversarySpec::StaleVote { start, end, .. } => *start <= t && t < *end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub max_sim_time: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, max_sim_time: 20_000 }
    }
}

/// Thresholds the property report checks beyond the always-on ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expect {
    pub min_finalized: u64,
    pub min_sealed: u64,
    pub min_slashes: u64,
    /// Sealing must move past every withheld collection's block.
    pub seal_after_withheld: bool,
    pub min_equivocation_slashes: u64,
}

impl Default for Expect {
    fn default() -> Self {
        Self { min_finalized: 1, min_sealed: 0, min_slashes: 0, seal_after_withheld: true, min_equivocation_slashes: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub roles: Roles,
    pub clusters: Clusters,
    pub consensus: ConsensusSection,
    pub drb: DrbSection,
    pub execution: ExecutionSection,
    pub verification: VerificationSection,
    pub network: NetworkSection,
    pub adversary: Vec<AdversarySpec>,
    pub run: RunSection,
    pub expect: Expect,
}

/// Bundled scenarios, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("happy-path", include_str!("../scenarios/happy-path.json")),
    ("byzantine-executor", include_str!("../scenarios/byzantine-executor.json")),
    ("withheld-collection", include_str!("../scenarios/withheld-collection.json")),
    ("equivocating-leader", include_str!("../scenarios/equivocating-leader.json")),
    ("network-partition", include_str!("../scenarios/network-partition.json")),
    ("pre-gst-chaos", include_str!("../scenarios/pre-gst-chaos.json")),
];

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl Scenario {
    /// Parses and validates. Errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Self::from_json_with(text, &[])
    }

    /// Like [`Scenario::from_json`], applying `key=value` overrides first.
    pub fn from_json_with(text: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let mut tree: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let s: Scenario = if overrides.is_empty() {
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?
        } else {
            serde_json::from_value(tree).map_err(|e| ScenarioError::Parse(format!("after overrides: {e}")))?
        };
        s.validate()?;
        Ok(s)
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        Self::from_json(bundled_source(name).ok_or_else(|| ScenarioError::UnknownBundled(name.into()))?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let r = &self.roles;
        for (name, spec) in [("consensus", &r.consensus), ("collectors", &r.collectors), ("executors", &r.executors), ("verifiers", &r.verifiers)] {
            if spec.count == 0 {
                return bad(format!("roles.{name}.count must be at least 1"));
            }
            if spec.stake == 0 {
                return bad(format!("roles.{name}.stake must be positive"));
            }
        }
        if self.clusters.count == 0 || self.clusters.count > r.collectors.count {
            return bad(format!("clusters.count must be in 1..={}", r.collectors.count));
        }
        if self.clusters.collection_threshold == 0 {
            return bad("clusters.collection_threshold must be positive".into());
        }
        if self.drb.n_s == 0 || self.drb.n_s > r.consensus.count {
            return bad(format!("drb.n_s must be in 1..={} (consensus nodes)", r.consensus.count));
        }
        let n = &self.network;
        if n.delta_t == 0 {
            return bad("network.delta_t must be positive".into());
        }
        if !(n.phi_t >= 1.0 && n.phi_t.is_finite()) {
            return bad("network.phi_t must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&n.drop) {
            return bad("network.drop must be in [0, 1]".into());
        }
        if n.pre_gst_delay_factor == 0 {
            return bad("network.pre_gst_delay_factor must be positive".into());
        }
        let names = self.node_names();
        for p in &n.partitions {
            if p.start >= p.end {
                return bad(format!("partition [{}, {}) is empty", p.start, p.end));
            }
            for g in p.groups.iter().flatten() {
                if !names.iter().any(|x| x == g) {
                    return bad(format!("partition names unknown node `{g}`"));
                }
            }
        }
        let v = &self.verification;
        if !(v.coverage > 0.0 && v.coverage <= 1.0) {
            return bad("verification.coverage must be in (0, 1]".into());
        }
        if v.mcc_deadline_blocks == 0 {
            return bad("verification.mcc_deadline_blocks must be positive".into());
        }
        let e = &self.execution;
        if e.chunk_budget == 0 || e.tx_interval == 0 || e.tx_cost_max == 0 || e.tx_key_space == 0 || e.tx_window == 0 {
            return bad("execution parameters must be positive".into());
        }
        if e.retrieval_timeout == 0 {
            return bad("execution.retrieval_timeout must be positive".into());
        }
        if self.consensus.base_timeout == 0 || self.consensus.max_collections_per_block == 0 {
            return bad("consensus.base_timeout and max_collections_per_block must be positive".into());
        }
        for a in &self.adversary {
            if let Some(node) = a.node() {
                let want = match a {
                    AdversarySpec::FaultyExecution { .. } => Some("execution-"),
                    AdversarySpec::EquivocateProposal { .. } | AdversarySpec::StaleVote { .. } => Some("consensus-"),
                    _ => None,
                };
                if !names.iter().any(|x| x == node) {
                    return bad(format!("adversary {} names unknown node `{node}`", a.name()));
                }
                if let Some(prefix) = want {
                    if !node.starts_with(prefix) {
                        return bad(format!("adversary {} cannot be attached to `{node}`", a.name()));
                    }
                }
            }
            if let AdversarySpec::WithholdCollection { cluster, interval, .. } = a {
                if *cluster >= self.clusters.count {
                    return bad(format!("adversary withhold_collection names cluster {cluster} of {}", self.clusters.count));
                }
                if *interval == 0 {
                    return bad("adversary withhold_collection interval must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Node names in node-index order.
    pub fn node_names(&self) -> Vec<String> {
        let r = &self.roles;
        let mut out = Vec::new();
        for (prefix, n) in [
            ("consensus", r.consensus.count),
            ("collector", r.collectors.count),
            ("execution", r.executors.count),
            ("verification", r.verifiers.count),
            ("client", r.clients),
        ] {
            out.extend((0..n).map(|i| format!("{prefix}-{i}")));
        }
        out
    }
}

/// `a.b.c=value`: the value is parsed as JSON, falling back to a string.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<(), ScenarioError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ScenarioError::BadOverride(spec.into()))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cur = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let fail = |reason: &str| ScenarioError::OverridePath { key: key.into(), reason: reason.into() };
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).into(), value);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| fail("array index expected"))?;
                let slot = items.get_mut(idx).ok_or_else(|| fail("array index out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(fail("path runs through a scalar")),
        };
    }
    Err(ScenarioError::BadOverride(spec.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_valid_scenario() {
        let s = Scenario::from_json("{}").unwrap();
        assert_eq!(s.roles.consensus.count, 7);
        assert_eq!(s.network.delta_t, 100);
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = Scenario::from_json("{\n  \"network\": {\n    \"delta\": 5\n  }\n}").unwrap_err().to_string();
        assert!(err.contains("unknown field `delta`"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let s = Scenario::from_json_with("{}", &["run.seed=9".into(), "network.gst=500".into(), "name=x".into()]).unwrap();
        assert_eq!(s.run.seed, 9);
        assert_eq!(s.network.gst, 500);
        assert_eq!(s.name, "x");
        assert!(Scenario::from_json_with("{}", &["run.seed".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(Scenario::from_json(r#"{"drb": {"n_s": 0}}"#).is_err());
        assert!(Scenario::from_json(r#"{"network": {"phi_t": 0.5}}"#).is_err());
        assert!(Scenario::from_json(r#"{"adversary": [{"behavior": "faulty_execution", "node": "consensus-0"}]}"#).is_err());
        assert!(Scenario::from_json(r#"{"adversary": [{"behavior": "withhold_collection", "cluster": 5}]}"#).is_err());
        assert!(Scenario::from_json(r#"{"adversary": [{"behavior": "teleport", "node": "consensus-0"}]}"#).is_err());
    }

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let s = Scenario::bundled(name).unwrap();
            assert_eq!(&s.name, name);
        }
    }
}

//! Scenario configuration, read from TOML. Every key has a default; unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chains::MaliciousStrategy;
use crate::election::sortition::class_size;
use crate::election::{ElectionMode, ScoreWeights};
use crate::error::{Error, Result};
use crate::recovery::DependencyGraph;
use crate::traffic::{ModuleTable, TrafficParams};
use crate::types::{max_faulty, ModuleId};

/// Simulated seconds per mainchain round.
pub const MAIN_ROUND_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    #[default]
    Chainscale,
    Single,
    Sharded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerParams {
    pub count: u32,
    pub p_lazy: f64,
    pub p_malicious: f64,
    pub classes: u32,
    pub weights: ScoreWeights,
    pub power_mean: f64,
    pub power_sd: f64,
}

impl Default for MinerParams {
    fn default() -> Self {
        MinerParams {
            count: 8000,
            p_lazy: 0.0,
            p_malicious: 0.0,
            classes: 2,
            weights: ScoreWeights::default(),
            power_mean: 10.0,
            power_sd: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommitteeParams {
    pub size: u32,
    /// Backup committees per sidechain (kappa).
    pub backups: u32,
    /// 0 derives size + 1 - (2f + 2).
    pub liveness_threshold: u32,
    pub strategy: MaliciousStrategy,
    pub election: ElectionMode,
    /// 0 uses the committee size.
    pub sync_size: u32,
    /// Smallest scaled-down sub-sidechain committee; 0 uses size / 2.
    pub min_size: u32,
    /// Per-module class composition of one committee, keyed by module name.
    pub quotas: BTreeMap<String, Vec<u64>>,
}

impl Default for CommitteeParams {
    fn default() -> Self {
        CommitteeParams {
            size: 500,
            backups: 2,
            liveness_threshold: 0,
            strategy: MaliciousStrategy::default(),
            election: ElectionMode::default(),
            sync_size: 0,
            min_size: 0,
            quotas: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainParams {
    pub main_capacity_bytes: u64,
    pub side_capacity_bytes: u64,
    pub confirmation_depth: u32,
    /// Allocation order, highest priority first.
    pub priority: Vec<String>,
    /// Drop an epoch's meta-blocks once its sync is confirmed.
    pub prune: bool,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            main_capacity_bytes: 1_000_000,
            side_capacity_bytes: 1_000_000,
            confirmation_depth: 1,
            priority: vec!["dispute".into(), "payment".into(), "match".into()],
            prune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryParams {
    /// Silence, in sidechain rounds, before a dependency counts as stalled.
    pub eta: u32,
    pub step_in_minutes: f64,
    /// `[source, target]`: source gates on target.
    pub dependencies: Vec<[String; 2]>,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams {
            eta: 2,
            step_in_minutes: 5.0,
            dependencies: vec![
                ["match".into(), "dispute".into()],
                ["payment".into(), "dispute".into()],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptedEvent {
    /// The seated committee misses the vote threshold at this sidechain round.
    CommitteeFailure {
        module: String,
        #[serde(default)]
        sub: u32,
        round: u32,
        #[serde(default)]
        offset: u32,
    },
    LeaderFailure {
        module: String,
        #[serde(default)]
        sub: u32,
        round: u32,
        #[serde(default)]
        offset: u32,
    },
    /// The chain produces nothing for `duration` sidechain rounds.
    Stall {
        module: String,
        #[serde(default)]
        sub: u32,
        round: u32,
        #[serde(default)]
        offset: u32,
        duration: u32,
    },
    /// Drop the last `depth` mainchain blocks at the end of `round`.
    Rollback { round: u32, depth: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub system: System,
    /// Mainchain rounds with fresh traffic.
    pub rounds: u32,
    /// Epoch length omega in mainchain rounds.
    pub epoch_rounds: u32,
    /// Sidechain rounds per mainchain round (rho).
    pub side_rounds: u32,
    /// Sub-sidechain caps, e.g. "3P1M1D".
    pub topology: String,
    pub shards: u32,
    /// Extra mainchain rounds allowed for draining queues.
    pub max_drain_rounds: u32,
    pub miners: MinerParams,
    pub committee: CommitteeParams,
    pub chains: ChainParams,
    pub traffic: TrafficParams,
    pub recovery: RecoveryParams,
    pub events: Vec<ScriptedEvent>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            system: System::Chainscale,
            rounds: 61,
            epoch_rounds: 10,
            side_rounds: 3,
            topology: "1P1M1D".into(),
            shards: 4,
            max_drain_rounds: 5000,
            miners: MinerParams::default(),
            committee: CommitteeParams::default(),
            chains: ChainParams::default(),
            traffic: TrafficParams::default(),
            recovery: RecoveryParams::default(),
            events: Vec::new(),
        }
    }
}

/// Parsed "aPbMcD".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub payment: u32,
    pub matching: u32,
    pub dispute: u32,
}

impl Topology {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("topology", format!("`{s}` is not of the form aPbMcD"));
        let mut caps: BTreeMap<char, u32> = BTreeMap::new();
        let mut digits = String::new();
        for ch in s.trim().chars() {
            if ch.is_ascii_digit() {
                digits.push(ch);
            } else {
                let key = ch.to_ascii_uppercase();
                if !matches!(key, 'P' | 'M' | 'D') || digits.is_empty() {
                    return Err(bad());
                }
                let n: u32 = digits.parse().map_err(|_| bad())?;
                if n == 0 || caps.insert(key, n).is_some() {
                    return Err(bad());
                }
                digits.clear();
            }
        }
        if !digits.is_empty() || caps.len() != 3 {
            return Err(bad());
        }
        Ok(Topology {
            payment: caps[&'P'],
            matching: caps[&'M'],
            dispute: caps[&'D'],
        })
    }

    pub fn cap(&self, m: ModuleId) -> u32 {
        match m {
            ModuleId::PAYMENT => self.payment,
            ModuleId::MATCH => self.matching,
            ModuleId::DISPUTE => self.dispute,
            _ => 1,
        }
    }

    pub fn total(&self) -> u32 {
        self.payment + self.matching + self.dispute
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}P{}M{}D", self.payment, self.matching, self.dispute)
    }
}

/// Module id for a configured module name.
pub fn module_by_name(table: &ModuleTable, name: &str) -> Option<ModuleId> {
    let alias = match name {
        "match" | "matching" => "market_matching",
        "payment" => "service_payment",
        "all" | "single" => "all_services",
        other => other,
    };
    table.modules().iter().find(|m| m.name == alias).map(|m| m.id)
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn table(&self) -> ModuleTable {
        match self.system {
            System::Single => ModuleTable::single_sidechain(),
            _ => ModuleTable::chainscale(),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::parse(&self.topology)
    }

    pub fn contracts(&self) -> u64 {
        u64::from(self.miners.count) * u64::from(self.traffic.contracts_per_node)
    }

    pub fn ticks_per_epoch(&self) -> u64 {
        u64::from(self.epoch_rounds) * u64::from(self.side_rounds)
    }

    pub fn step_in_ticks(&self) -> u64 {
        let per_tick_min = MAIN_ROUND_SECONDS / f64::from(self.side_rounds) / 60.0;
        (self.recovery.step_in_minutes / per_tick_min).round() as u64
    }

    pub fn liveness_threshold(&self) -> u64 {
        match self.committee.liveness_threshold {
            0 => {
                let s = self.committee.size as usize;
                (s + 1 - (2 * max_faulty(s) + 2)) as u64
            }
            t => u64::from(t),
        }
    }

    pub fn dependency_graph(&self) -> Result<DependencyGraph> {
        let table = self.table();
        let mut edges = Vec::new();
        for [s, t] in &self.recovery.dependencies {
            let (Some(a), Some(b)) = (module_by_name(&table, s), module_by_name(&table, t)) else {
                if self.system == System::Single {
                    continue;
                }
                return Err(Error::config("recovery.dependencies", format!("unknown module in [{s}, {t}]")));
            };
            edges.push((a, b));
        }
        DependencyGraph::new(edges)
    }

    /// Modules in allocation priority order; unlisted modules follow in id order.
    pub fn priority(&self) -> Result<Vec<ModuleId>> {
        let table = self.table();
        let mut out = Vec::new();
        for name in &self.chains.priority {
            match module_by_name(&table, name) {
                Some(m) if !out.contains(&m) => out.push(m),
                Some(_) => return Err(Error::config("chains.priority", format!("`{name}` listed twice"))),
                None if self.system == System::Single => {}
                None => return Err(Error::config("chains.priority", format!("unknown module `{name}`"))),
            }
        }
        for m in table.module_ids() {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Class composition of one committee for `module`.
    pub fn quota(&self, module: ModuleId) -> Result<Vec<u64>> {
        let table = self.table();
        let c = self.miners.classes as usize;
        let s = u64::from(self.committee.size);
        for (name, q) in &self.committee.quotas {
            if module_by_name(&table, name) == Some(module) {
                return Ok(q.clone());
            }
        }
        // even split, remainder to the top classes; dispute leans on class 1
        let mut q: Vec<u64> = (0..c as u64).map(|i| s / c as u64 + u64::from(i < s % c as u64)).collect();
        if module == ModuleId::DISPUTE && c > 1 && self.system == System::Chainscale {
            let top = (s * 6).div_ceil(10);
            let rest = s - top;
            let others = (c - 1) as u64;
            q = std::iter::once(top)
                .chain((0..others).map(|i| rest / others + u64::from(i < rest % others)))
                .collect();
        }
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: u64| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("rounds", u64::from(self.rounds))?;
        pos("epoch_rounds", u64::from(self.epoch_rounds))?;
        pos("side_rounds", u64::from(self.side_rounds))?;
        pos("miners.count", u64::from(self.miners.count))?;
        pos("miners.classes", u64::from(self.miners.classes))?;
        pos("committee.size", u64::from(self.committee.size))?;
        pos("chains.main_capacity_bytes", self.chains.main_capacity_bytes)?;
        pos("chains.side_capacity_bytes", self.chains.side_capacity_bytes)?;
        pos("chains.confirmation_depth", u64::from(self.chains.confirmation_depth))?;
        pos("recovery.eta", u64::from(self.recovery.eta))?;
        pos("shards", u64::from(self.shards))?;
        for (field, p) in [("miners.p_lazy", self.miners.p_lazy), ("miners.p_malicious", self.miners.p_malicious)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.miners.p_lazy + self.miners.p_malicious > 1.0 {
            return Err(Error::config("miners.p_malicious", "p_lazy + p_malicious exceeds 1"));
        }
        if !(self.miners.power_sd >= 0.0) || !self.miners.power_mean.is_finite() {
            return Err(Error::config("miners.power_sd", "must be a nonnegative number"));
        }
        self.miners
            .weights
            .validate()
            .map_err(|e| Error::config("miners.weights", e.to_string()))?;
        if !(self.recovery.step_in_minutes >= 0.0) || !self.recovery.step_in_minutes.is_finite() {
            return Err(Error::config("recovery.step_in_minutes", "must be a nonnegative number"));
        }
        if self.miners.classes > self.miners.count {
            return Err(Error::config("miners.classes", "more classes than miners"));
        }
        if u64::from(self.committee.liveness_threshold) > u64::from(self.committee.size) {
            return Err(Error::config("committee.liveness_threshold", "exceeds committee size"));
        }
        if self.committee.sync_size > self.committee.size {
            return Err(Error::config("committee.sync_size", "exceeds committee size"));
        }
        if self.committee.min_size > self.committee.size {
            return Err(Error::config("committee.min_size", "exceeds committee size"));
        }
        self.traffic.validate()?;
        let topo = self.topology()?;
        self.priority()?;
        self.dependency_graph()?;

        let n = u64::from(self.miners.count);
        let per_chain = u64::from(self.committee.backups + 1) * u64::from(self.committee.size);
        let chains = match self.system {
            System::Chainscale => u64::from(topo.total()),
            System::Single => 1,
            System::Sharded => u64::from(self.shards),
        };
        let needed = if self.system == System::Sharded {
            u64::from(self.committee.size) * chains
        } else {
            per_chain * chains
        };
        if needed > n {
            return Err(Error::config(
                "miners.count",
                format!("{needed} committee seats needed but only {n} miners"),
            ));
        }

        let table = self.table();
        for name in self.committee.quotas.keys() {
            if module_by_name(&table, name).is_none() {
                return Err(Error::config(format!("committee.quotas.{name}"), "unknown module"));
            }
        }
        if self.committee.election == ElectionMode::Weighted && self.system != System::Sharded {
            let c = self.miners.classes as usize;
            let mut demand = vec![0u64; c];
            for m in table.module_ids() {
                let q = self.quota(m)?;
                let field = format!("committee.quotas.{}", table.spec(m).map_or("?", |s| s.name.as_str()));
                if q.len() != c {
                    return Err(Error::config(field, format!("needs one count per class ({c})")));
                }
                if q.iter().sum::<u64>() != u64::from(self.committee.size) {
                    return Err(Error::config(field, "counts must sum to committee.size"));
                }
                for (d, x) in demand.iter_mut().zip(&q) {
                    *d += x * u64::from(self.committee.backups + 1);
                }
            }
            for (i, d) in demand.iter().enumerate() {
                let have = class_size(n as usize, c, i + 1);
                if *d > have {
                    return Err(Error::config(
                        "committee.quotas",
                        format!("class {} needs {d} miners but has {have}", i + 1),
                    ));
                }
            }
        }
        for ev in &self.events {
            match ev {
                ScriptedEvent::CommitteeFailure { module, offset, .. }
                | ScriptedEvent::LeaderFailure { module, offset, .. }
                | ScriptedEvent::Stall { module, offset, .. } => {
                    if module_by_name(&table, module).is_none() {
                        return Err(Error::config("events.module", format!("unknown module `{module}`")));
                    }
                    if *offset >= self.side_rounds {
                        return Err(Error::config("events.offset", "must be below side_rounds"));
                    }
                }
                ScriptedEvent::Rollback { depth, .. } => {
                    if *depth == 0 || *depth >= self.chains.confirmation_depth {
                        return Err(Error::config(
                            "events.depth",
                            "rollback depth must be positive and below chains.confirmation_depth",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One line per config key: dotted path and default value.
pub fn documented_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let v = toml::Value::try_from(ScenarioConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    walk("", &v, &mut out);
    out
}

/// Apply `key=value` overrides to a TOML document. Keys must already exist
/// in the defaults, except per-module quota entries.
pub fn apply_overrides(base: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut doc: toml::Table = toml::from_str(base).map_err(|e| Error::config("config", e.message().to_string()))?;
    let defaults = toml::Value::try_from(ScenarioConfig::default()).expect("config serializes");
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::config(ov.clone(), "override must look like key=value"))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        let known = key.starts_with("committee.quotas.") && path.len() == 3 || {
            let mut cur = &defaults;
            path.iter().all(|p| match cur.get(p) {
                Some(next) => {
                    cur = next;
                    true
                }
                None => false,
            }) && !cur.is_table()
        };
        if !known {
            return Err(Error::config(key, "unknown config key"));
        }
        let value = parse_value(raw.trim());
        let mut table = &mut doc;
        for p in &path[..path.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(key, "parent is not a table"))?;
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }
    let text = toml::to_string(&doc).map_err(|e| Error::config("config", e.to_string()))?;
    ScenarioConfig::from_toml_str(&text)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

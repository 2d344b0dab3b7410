//! Autorecovery: interruption detection, inter-module gating, failover,
//! view changes and mass-syncing.

pub mod montecarlo;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chains::summary::create_sync_tx;
use crate::chains::{SidechainState, TickEvent};
use crate::error::{Error, Result};
use crate::types::{MinerId, ModuleId, SidechainId, SummaryBlock, SyncTransaction};

pub use montecarlo::{monte_carlo_recovery, McElection, McParams, McReport, WeightedPopulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterruptionKind {
    CommitteeFailure,
    LeaderFailure,
    MainchainRollback(u32),
    DependencyStall(ModuleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterruptionEvent {
    pub sidechain: SidechainId,
    pub epoch: u32,
    pub round_detected: u64,
    pub kind: InterruptionKind,
}

/// Edges `source -> target`: source gates on target's liveness.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DependencyGraph {
    edges: BTreeMap<ModuleId, BTreeSet<ModuleId>>,
}

impl DependencyGraph {
    pub fn new(edges: impl IntoIterator<Item = (ModuleId, ModuleId)>) -> Result<Self> {
        let mut g = DependencyGraph::default();
        for (s, t) in edges {
            if s == t {
                return Err(Error::config("recovery.dependencies", format!("self-dependency on {s}")));
            }
            g.edges.entry(s).or_default().insert(t);
        }
        if g.has_cycle() {
            return Err(Error::config("recovery.dependencies", "dependency graph has a cycle"));
        }
        Ok(g)
    }

    /// match -> dispute, service-payment -> dispute.
    pub fn chainscale() -> Self {
        Self::new([(ModuleId::MATCH, ModuleId::DISPUTE), (ModuleId::PAYMENT, ModuleId::DISPUTE)]).expect("acyclic")
    }

    pub fn dependencies(&self, m: ModuleId) -> impl Iterator<Item = ModuleId> + '_ {
        self.edges.get(&m).into_iter().flatten().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ModuleId, ModuleId)> + '_ {
        self.edges.iter().flat_map(|(s, ts)| ts.iter().map(move |t| (*s, *t)))
    }

    fn has_cycle(&self) -> bool {
        // 0 unvisited, 1 on stack, 2 done
        fn visit(g: &DependencyGraph, m: ModuleId, state: &mut BTreeMap<ModuleId, u8>) -> bool {
            match state.get(&m) {
                Some(1) => return true,
                Some(2) => return false,
                _ => {}
            }
            state.insert(m, 1);
            if g.dependencies(m).any(|t| visit(g, t, state)) {
                return true;
            }
            state.insert(m, 2);
            false
        }
        let mut state = BTreeMap::new();
        self.edges.keys().any(|&m| visit(self, m, &mut state))
    }
}

/// Timeout check for a depended-upon chain. A chain that has never produced
/// counts from round 0.
pub fn is_silent(last_block: Option<u64>, now: u64, eta: u64) -> bool {
    now.saturating_sub(last_block.unwrap_or(0)) >= eta
}

pub fn detect_interruption(
    observed: SidechainId,
    epoch: u32,
    last_block: Option<u64>,
    now: u64,
    eta: u64,
    local_failure: bool,
    dependent: Option<SidechainId>,
) -> Option<InterruptionEvent> {
    if local_failure {
        return Some(InterruptionEvent {
            sidechain: observed,
            epoch,
            round_detected: now,
            kind: InterruptionKind::CommitteeFailure,
        });
    }
    is_silent(last_block, now, eta).then(|| InterruptionEvent {
        sidechain: dependent.unwrap_or(observed),
        epoch,
        round_detected: now,
        kind: InterruptionKind::DependencyStall(observed.module),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive {
    Normal,
    MineEmpty,
}

/// A module is gated while any of its dependencies has been silent for eta rounds.
pub fn gate_on_dependency(
    graph: &DependencyGraph,
    module: ModuleId,
    last_block_of: impl Fn(ModuleId) -> Option<u64>,
    now: u64,
    eta: u64,
) -> Directive {
    if graph.dependencies(module).any(|d| is_silent(last_block_of(d), now, eta)) {
        Directive::MineEmpty
    } else {
        Directive::Normal
    }
}

pub fn failover(sc: &mut SidechainState, tick: u64, step_in_ticks: u64) -> Result<TickEvent> {
    match sc.failover(tick, step_in_ticks) {
        TickEvent::Exhausted => Err(Error::AllCommitteesExhausted(sc.id)),
        ev => Ok(ev),
    }
}

pub fn view_change(sc: &mut SidechainState) -> MinerId {
    sc.view_change();
    sc.committee().expect("seated committee").leader_id()
}

/// One sync-transaction covering `epochs` (current plus every unsynced
/// prior epoch), applied in epoch order.
pub fn mass_sync(
    module: ModuleId,
    epochs: &BTreeSet<u32>,
    summaries: &BTreeMap<u32, SummaryBlock>,
    pruned: &BTreeSet<u32>,
    issuer: MinerId,
    requested_subchains: u32,
) -> Result<SyncTransaction> {
    let chain = SidechainId::primary(module);
    let mut blocks = Vec::with_capacity(epochs.len());
    for &e in epochs {
        if pruned.contains(&e) {
            return Err(Error::MissingMetaBlocks { chain, epoch: e });
        }
        let s = summaries.get(&e).ok_or(Error::MissingMetaBlocks { chain, epoch: e })?;
        blocks.push(s.clone());
    }
    Ok(create_sync_tx(blocks, issuer, requested_subchains))
}

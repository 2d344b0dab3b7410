//! Sidechain engine: per-round meta-block production under PBFT-style vote
//! counting, transaction validation against finalized state, failover and
//! view changes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::mainchain::LedgerState;
use crate::types::{Behavior, Committee, ContractId, MetaBlock, ModuleId, SidechainId, Transaction, TxKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaliciousStrategy {
    /// Never vote, never propose.
    Withhold,
    /// Behave until the epoch's last round, then withhold and propose invalid blocks.
    #[default]
    WorstCase,
    /// Withhold and propose invalid blocks from the first round.
    BestCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Active,
    /// A backup committee is taking over; it can produce from `until`.
    SteppingIn { until: u64 },
    /// Every committee failed; the chain is silent until the epoch ends.
    Exhausted,
    /// No committee seated (inactive sub-sidechain).
    Idle,
}

/// Module-level finalized state, updated when an epoch closes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModuleLedger {
    /// (ask seen, offer seen) since the contract's last deal.
    pub negotiations: BTreeMap<ContractId, (bool, bool)>,
    /// Finalized payments per epoch not yet reflected in mainchain escrow.
    pub debits: BTreeMap<u32, BTreeMap<ContractId, u64>>,
}

impl ModuleLedger {
    pub fn pending_debit(&self, cid: ContractId) -> u64 {
        self.debits.values().filter_map(|m| m.get(&cid)).sum()
    }

    pub fn merge(&mut self, epoch: u32, delta: LedgerDelta) {
        self.negotiations.extend(delta.negotiations);
        if !delta.debits.is_empty() {
            let slot = self.debits.entry(epoch).or_default();
            for (cid, d) in delta.debits {
                *slot.entry(cid).or_default() += d;
            }
        }
    }

    /// Escrow now reflects these epochs.
    pub fn clear_debits(&mut self, epochs: impl IntoIterator<Item = u32>) {
        for e in epochs {
            self.debits.remove(&e);
        }
    }
}

/// Changes a sub-sidechain finalized during the current epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerDelta {
    pub negotiations: BTreeMap<ContractId, (bool, bool)>,
    pub debits: BTreeMap<ContractId, u64>,
}

/// Where a validation read was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSource {
    OwnModule,
    MainchainConfirmed,
    OtherModuleFinalized(ModuleId),
    OtherModulePending(ModuleId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadLog {
    pub own: u64,
    pub mainchain: u64,
    pub foreign_finalized: u64,
    /// Reads of another module's un-finalized state: cross-sidechain work.
    pub foreign_pending: u64,
}

impl ReadLog {
    pub fn record(&mut self, source: StateSource) {
        match source {
            StateSource::OwnModule => self.own += 1,
            StateSource::MainchainConfirmed => self.mainchain += 1,
            StateSource::OtherModuleFinalized(_) => self.foreign_finalized += 1,
            StateSource::OtherModulePending(_) => self.foreign_pending += 1,
        }
    }

    pub fn add(&mut self, o: &ReadLog) {
        self.own += o.own;
        self.mainchain += o.mainchain;
        self.foreign_finalized += o.foreign_finalized;
        self.foreign_pending += o.foreign_pending;
    }
}

/// Read-only state a sidechain validates against.
#[derive(Clone, Copy)]
pub struct ValidationView<'a> {
    pub ledger: &'a ModuleLedger,
    pub main: &'a LedgerState,
}

/// Validate `tx` and, if valid, record its effect in `delta`.
pub fn validate_tx(tx: &Transaction, view: ValidationView<'_>, delta: &mut LedgerDelta, log: &mut ReadLog) -> bool {
    let Some(cid) = tx.contract_id else {
        return false;
    };
    let mut negotiation = |log: &mut ReadLog| {
        log.record(StateSource::OwnModule);
        *delta
            .negotiations
            .entry(cid)
            .or_insert_with(|| view.ledger.negotiations.get(&cid).copied().unwrap_or_default())
    };
    match tx.kind {
        TxKind::Ask => {
            let (_, offer) = negotiation(log);
            delta.negotiations.insert(cid, (true, offer));
            true
        }
        TxKind::Offer => {
            let (ask, _) = negotiation(log);
            delta.negotiations.insert(cid, (ask, true));
            true
        }
        TxKind::Agreement => {
            let (ask, offer) = negotiation(log);
            if ask && offer {
                delta.negotiations.insert(cid, (false, false));
            }
            ask && offer
        }
        TxKind::ServiceProof => {
            log.record(StateSource::OwnModule);
            tx.valid
        }
        TxKind::ServicePayment => {
            log.record(StateSource::MainchainConfirmed);
            log.record(StateSource::OwnModule);
            let escrow = view.main.escrows.get(&cid).copied().unwrap_or(0);
            let pending = view.ledger.pending_debit(cid) + delta.debits.get(&cid).copied().unwrap_or(0);
            let ok = escrow >= pending + tx.amount;
            if ok {
                *delta.debits.entry(cid).or_default() += tx.amount;
            }
            ok
        }
        TxKind::Dispute => {
            log.record(StateSource::OwnModule);
            tx.valid
        }
        _ => false,
    }
}

pub struct TickContext<'a> {
    pub tick: u64,
    pub epoch: u32,
    pub epoch_last_tick: u64,
    /// A dependency has been silent for at least eta rounds.
    pub gated: bool,
    pub force_leader_failure: bool,
    pub force_committee_failure: bool,
    pub behaviors: &'a [Behavior],
    pub strategy: MaliciousStrategy,
    pub step_in_ticks: u64,
    /// Absent votes at which a committee stalls; 0 uses size + 1 - (2f + 2).
    pub liveness_threshold: usize,
    pub view: ValidationView<'a>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickEvent {
    Block { bytes: u64, txs: usize, empty: bool, full: bool },
    ViewChange { new_leader: usize },
    ConsensusFailure { rank: usize },
    Failover { rank: usize, until: u64 },
    Exhausted,
    Recovered { ticks: u64 },
    Idle,
}

#[derive(Debug, Default)]
pub struct TickOutput {
    pub events: Vec<TickEvent>,
    pub finalized: Vec<Transaction>,
    pub rejected: Vec<Transaction>,
    pub reads: ReadLog,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpochStats {
    pub blocks: u32,
    pub full_blocks: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SidechainState {
    pub id: SidechainId,
    pub capacity: u64,
    pub metas: Vec<MetaBlock>,
    pub mempool: VecDeque<Transaction>,
    /// Primary first, then backups by rank.
    pub committees: Vec<Committee>,
    pub active: usize,
    pub status: ChainStatus,
    pub last_block_tick: Option<u64>,
    pub failed_since: Option<u64>,
    pub delta: LedgerDelta,
    pub stats: EpochStats,
    pub served: BTreeSet<usize>,
    pub failed: BTreeSet<usize>,
}

impl SidechainState {
    pub fn new(id: SidechainId, capacity: u64) -> Self {
        SidechainState {
            id,
            capacity,
            metas: Vec::new(),
            mempool: VecDeque::new(),
            committees: Vec::new(),
            active: 0,
            status: ChainStatus::Idle,
            last_block_tick: None,
            failed_since: None,
            delta: LedgerDelta::default(),
            stats: EpochStats::default(),
            served: BTreeSet::new(),
            failed: BTreeSet::new(),
        }
    }

    /// Seat a fresh primary and backups for a new epoch.
    pub fn seat(&mut self, committees: Vec<Committee>) {
        self.status = if committees.is_empty() {
            ChainStatus::Idle
        } else {
            ChainStatus::Active
        };
        self.committees = committees;
        self.active = 0;
        self.stats = EpochStats::default();
        self.served.clear();
        self.failed.clear();
    }

    pub fn committee(&self) -> Option<&Committee> {
        self.committees.get(self.active)
    }

    pub fn mempool_bytes(&self) -> u64 {
        self.mempool.iter().map(|t| u64::from(t.size_bytes)).sum()
    }

    pub fn meta_bytes(&self) -> u64 {
        self.metas.iter().map(MetaBlock::bytes).sum()
    }

    pub fn metas_of(&self, epoch: u32) -> impl Iterator<Item = &MetaBlock> {
        self.metas.iter().filter(move |m| m.epoch == epoch)
    }

    /// Remove every meta-block of `epoch`; returns bytes freed.
    pub fn prune_epoch(&mut self, epoch: u32) -> u64 {
        let before = self.meta_bytes();
        self.metas.retain(|m| m.epoch != epoch);
        before - self.meta_bytes()
    }

    /// Move to the next backup, or mark the chain exhausted.
    pub fn failover(&mut self, tick: u64, step_in_ticks: u64) -> TickEvent {
        if self.active + 1 < self.committees.len() {
            self.active += 1;
            let until = tick + 1 + step_in_ticks;
            self.status = ChainStatus::SteppingIn { until };
            TickEvent::Failover { rank: self.active, until }
        } else {
            self.status = ChainStatus::Exhausted;
            TickEvent::Exhausted
        }
    }

    /// Advance the leader round-robin.
    pub fn view_change(&mut self) -> usize {
        let c = &mut self.committees[self.active];
        c.leader = (c.leader + 1) % c.members.len();
        c.leader
    }

    fn votes(&self, ctx: &TickContext<'_>) -> usize {
        let committee = &self.committees[self.active];
        let last = ctx.tick == ctx.epoch_last_tick;
        committee
            .members
            .iter()
            .filter(|&&m| match ctx.behaviors[m as usize] {
                Behavior::Honest => true,
                Behavior::Lazy => false,
                Behavior::Malicious => ctx.strategy == MaliciousStrategy::WorstCase && !last,
            })
            .count()
    }

    fn leader_misbehaves(&self, ctx: &TickContext<'_>) -> bool {
        let committee = &self.committees[self.active];
        let last = ctx.tick == ctx.epoch_last_tick;
        match ctx.behaviors[committee.leader_id() as usize] {
            Behavior::Honest => false,
            Behavior::Lazy => true,
            Behavior::Malicious => ctx.strategy != MaliciousStrategy::WorstCase || last,
        }
    }

    /// One sidechain round.
    pub fn produce_meta_block(&mut self, ctx: &TickContext<'_>) -> TickOutput {
        let mut out = TickOutput::default();
        match self.status {
            ChainStatus::Idle | ChainStatus::Exhausted => {
                out.events.push(TickEvent::Idle);
                return out;
            }
            ChainStatus::SteppingIn { until } if ctx.tick < until => {
                out.events.push(TickEvent::Idle);
                return out;
            }
            ChainStatus::SteppingIn { .. } => self.status = ChainStatus::Active,
            ChainStatus::Active => {}
        }

        if ctx.force_leader_failure || self.leader_misbehaves(ctx) {
            let new_leader = self.view_change();
            out.events.push(TickEvent::ViewChange { new_leader });
            return out;
        }

        let committee = &self.committees[self.active];
        let needed = match ctx.liveness_threshold {
            0 => committee.votes_needed(),
            theta => (committee.size() + 1).saturating_sub(theta),
        };
        if ctx.force_committee_failure || self.votes(ctx) < needed {
            out.events.push(TickEvent::ConsensusFailure { rank: self.active });
            self.failed.insert(self.active);
            self.failed_since.get_or_insert(ctx.tick);
            out.events.push(self.failover(ctx.tick, ctx.step_in_ticks));
            return out;
        }

        let mut meta = MetaBlock {
            sidechain: self.id,
            epoch: ctx.epoch,
            round: ctx.tick as u32,
            txs: Vec::new(),
            capacity_bytes: self.capacity,
            empty: ctx.gated,
        };
        let mut full = false;
        if !ctx.gated {
            let mut used = 0u64;
            while let Some(front) = self.mempool.front() {
                let size = u64::from(front.size_bytes);
                if used + size > self.capacity {
                    full = true;
                    break;
                }
                let tx = self.mempool.pop_front().expect("front exists");
                if validate_tx(&tx, ctx.view, &mut self.delta, &mut out.reads) {
                    used += size;
                    meta.txs.push(tx);
                } else {
                    out.rejected.push(tx);
                }
            }
        }
        out.finalized = meta.txs.clone();
        let bytes = meta.bytes();
        out.events.push(TickEvent::Block {
            bytes,
            txs: meta.txs.len(),
            empty: meta.empty,
            full,
        });
        if let Some(since) = self.failed_since.take() {
            out.events.push(TickEvent::Recovered { ticks: ctx.tick - since });
        }
        self.stats.blocks += 1;
        self.stats.full_blocks += u32::from(full);
        self.stats.bytes += bytes;
        self.served.insert(self.active);
        self.last_block_tick = Some(ctx.tick);
        self.metas.push(meta);
        out
    }
}

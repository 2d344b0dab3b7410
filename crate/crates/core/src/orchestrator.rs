//! Epoch and round scheduler: election, traffic, sidechain rounds, summaries,
//! syncs, pruning, heavy-module scaling and recovery hooks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::chains::mainchain::{LedgerState, Mainchain};
use crate::chains::sidechain::{ChainStatus, ModuleLedger, SidechainState, TickContext, TickEvent, TickOutput, ValidationView};
use crate::chains::subchains::{allocate_subchains, detect_heavy, elect_sync_committee, route_to_subchain, SubchainRequest};
use crate::chains::summary::{create_sync_tx, produce_summary_block, verify_sync_tx};
use crate::config::{module_by_name, ScenarioConfig, ScriptedEvent, System};
use crate::election::sortition::{sortition_random, sortition_weighted};
use crate::election::{assign_classes, ClassQuota, ElectionMode, Seating, SlotId, VrfKeypair};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{MetricsReport, MetricsStore, ObsKind, Observation};
use crate::recovery::{gate_on_dependency, mass_sync, DependencyGraph, Directive};
use crate::seed;
use crate::traffic::{ChainTarget, ModuleTable, TrafficGenerator};
use crate::types::{
    Behavior, Committee, CommitteeRole, MainBlock, MetaBlock, MinerId, MinerRecord, ModuleId, Payload, SidechainId, SummaryBlock,
    Transaction, TxKind,
};

const SYSTEM_TX_BIT: u64 = 1 << 63;

/// A module's sync that reached the mainchain and was confirmed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncRecord {
    pub module: ModuleId,
    pub epochs: Vec<u32>,
    pub issued_round: u32,
    pub confirmed_round: u32,
    pub requested_subchains: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaRecord {
    pub chain: SidechainId,
    pub epoch: u32,
    pub tick: u64,
    pub txs: usize,
    pub gated: bool,
}

/// Everything a run leaves behind for reports and invariant checks.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub store: MetricsStore,
    pub final_state: LedgerState,
    pub genesis_state: LedgerState,
    /// Confirmed main blocks in height order.
    pub main_blocks: Vec<MainBlock>,
    pub syncs: Vec<SyncRecord>,
    pub metas: Vec<MetaRecord>,
    /// Meta-blocks still stored at the end (all of them when pruning is off).
    pub retained_metas: Vec<MetaBlock>,
    pub summaries: BTreeMap<(ModuleId, u32), SummaryBlock>,
    /// Subchains active per module per epoch.
    pub subchain_plan: BTreeMap<(ModuleId, u32), u32>,
    pub meta_payment_total: u64,
    pub escrow_created_total: u64,
    pub epochs: u32,
}

#[derive(Debug)]
struct ModuleRt {
    id: ModuleId,
    subchains: Vec<SidechainState>,
    active: u32,
    ledger: ModuleLedger,
    summaries: BTreeMap<u32, SummaryBlock>,
    pruned: BTreeSet<u32>,
    lost: BTreeSet<u32>,
    in_flight: BTreeMap<u32, u32>,
    requested: u32,
    cap: u32,
    arrivals_bytes: u64,
}

impl ModuleRt {
    fn label(&self) -> String {
        SidechainId::primary(self.id).to_string()
    }

    fn metas_of(&self, epoch: u32) -> impl Iterator<Item = &MetaBlock> {
        self.subchains.iter().flat_map(move |s| s.metas_of(epoch))
    }

    fn mempools_empty(&self) -> bool {
        self.subchains.iter().all(|s| s.mempool.is_empty())
    }
}

struct OpenEpoch {
    index: u32,
    end_round: u32,
    last_tick: u64,
}

struct Job<'a> {
    sc: &'a mut SidechainState,
    ledger: &'a ModuleLedger,
    gated: bool,
    stalled: bool,
    force_leader: bool,
    force_committee: bool,
    out: Option<TickOutput>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    exec: Exec,
    table: ModuleTable,
    graph: DependencyGraph,
    miners: Vec<MinerRecord>,
    keys: Vec<VrfKeypair>,
    behaviors: Vec<Behavior>,
    gen: TrafficGenerator,
    main: Mainchain,
    modules: Vec<ModuleRt>,
    store: MetricsStore,
    events: BTreeMap<u64, Vec<ScriptedEvent>>,
    rollbacks: BTreeMap<u32, u32>,
    stalls: BTreeMap<SidechainId, u64>,
    epoch: Option<OpenEpoch>,
    next_epoch: u32,
    next_sys_id: u64,
    generated: u64,
    main_outstanding: u64,
    syncs: Vec<SyncRecord>,
    metas: Vec<MetaRecord>,
    subchain_plan: BTreeMap<(ModuleId, u32), u32>,
    meta_payment_total: u64,
    escrow_created_total: u64,
    genesis_state: LedgerState,
    sync_issued: BTreeMap<(ModuleId, u32), u32>,
}

pub fn run_id(cfg: &ScenarioConfig) -> String {
    let system = match cfg.system {
        System::Chainscale => cfg.topology.clone(),
        System::Single => "single".into(),
        System::Sharded => format!("sharded{}", cfg.shards),
    };
    format!("{system}_s{}", cfg.seed)
}

/// Run one scenario to completion, draining every queue.
pub fn run_experiment(cfg: &ScenarioConfig, exec: Exec) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.system {
        System::Sharded => crate::baselines::sharded::run_sharded_market(cfg, cfg.shards, exec),
        _ => Simulation::new(cfg.clone(), exec)?.run(),
    }
}

/// Miner population with scores, classes and fixed behaviors.
pub fn build_miners(cfg: &ScenarioConfig) -> Result<(Vec<MinerRecord>, Vec<VrfKeypair>, Vec<Behavior>)> {
    let n = cfg.miners.count as usize;
    let mut rng = seed::rng(cfg.seed, "miners", &[]);
    let power = Normal::new(cfg.miners.power_mean, cfg.miners.power_sd)
        .map_err(|e| Error::config("miners.power_sd", e.to_string()))?;
    let keys: Vec<VrfKeypair> = (0..n)
        .map(|i| VrfKeypair::from_seed(seed::derive(cfg.seed, "miner-key", &[i as u64])))
        .collect();
    let lazy = (cfg.miners.p_lazy * n as f64).round() as usize;
    let malicious = ((cfg.miners.p_malicious * n as f64).round() as usize).min(n - lazy.min(n));
    let mut behaviors = vec![Behavior::Honest; n];
    for (i, idx) in sample(&mut rng, n, (lazy + malicious).min(n)).into_iter().enumerate() {
        behaviors[idx] = if i < lazy { Behavior::Lazy } else { Behavior::Malicious };
    }
    let miners = (0..n)
        .map(|i| MinerRecord {
            id: i as MinerId,
            pk: keys[i].public(),
            mining_power: power.sample(&mut rng).max(0.0),
            participation: 0,
            disputes: 0,
            score: 0.0,
            class: 1,
            behavior: behaviors[i],
        })
        .collect();
    Ok((miners, keys, behaviors))
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let table = cfg.table();
        let graph = if cfg.system == System::Single {
            DependencyGraph::default()
        } else {
            cfg.dependency_graph()?
        };
        let priority = cfg.priority()?;
        let topo = cfg.topology()?;
        let (miners, keys, behaviors) = build_miners(&cfg)?;
        let servers = cfg.miners.count;
        let gen = TrafficGenerator::new(
            cfg.traffic.clone(),
            table.clone(),
            servers,
            cfg.contracts(),
            cfg.epoch_rounds,
            cfg.seed,
        );
        let genesis_state = LedgerState::from_genesis(&gen.genesis());
        let main = Mainchain::new(
            genesis_state.clone(),
            cfg.chains.main_capacity_bytes,
            cfg.chains.confirmation_depth as usize,
        );
        let modules = priority
            .iter()
            .map(|&m| ModuleRt {
                id: m,
                subchains: vec![SidechainState::new(SidechainId::primary(m), cfg.chains.side_capacity_bytes)],
                active: 1,
                ledger: ModuleLedger::default(),
                summaries: BTreeMap::new(),
                pruned: BTreeSet::new(),
                lost: BTreeSet::new(),
                in_flight: BTreeMap::new(),
                requested: 1,
                cap: if cfg.system == System::Single { 1 } else { topo.cap(m) },
                arrivals_bytes: 0,
            })
            .collect();
        let mut events: BTreeMap<u64, Vec<ScriptedEvent>> = BTreeMap::new();
        let mut rollbacks = BTreeMap::new();
        let rho = u64::from(cfg.side_rounds);
        for ev in &cfg.events {
            match ev {
                ScriptedEvent::Rollback { round, depth } => {
                    rollbacks.insert(*round, *depth);
                }
                ScriptedEvent::CommitteeFailure { round, offset, .. }
                | ScriptedEvent::LeaderFailure { round, offset, .. }
                | ScriptedEvent::Stall { round, offset, .. } => {
                    events.entry(u64::from(*round) * rho + u64::from(*offset)).or_default().push(ev.clone());
                }
            }
        }
        let run = run_id(&cfg);
        Ok(Simulation {
            exec,
            table,
            graph,
            miners,
            keys,
            behaviors,
            gen,
            main,
            modules,
            store: MetricsStore::new(run),
            events,
            rollbacks,
            stalls: BTreeMap::new(),
            epoch: None,
            next_epoch: 0,
            next_sys_id: SYSTEM_TX_BIT,
            generated: 0,
            main_outstanding: 0,
            syncs: Vec::new(),
            metas: Vec::new(),
            subchain_plan: BTreeMap::new(),
            meta_payment_total: 0,
            escrow_created_total: 0,
            genesis_state,
            sync_issued: BTreeMap::new(),
            cfg,
        })
    }

    fn rho(&self) -> u64 {
        u64::from(self.cfg.side_rounds)
    }

    fn obs(&mut self, round: u32, tick: u64, chain: String, kind: ObsKind) -> Result<()> {
        self.store.record(Observation { round, tick, chain, kind })
    }

    fn module_index(&self, m: ModuleId) -> usize {
        self.modules.iter().position(|x| x.id == m).expect("known module")
    }

    fn sidechain_work(&self) -> bool {
        self.modules.iter().any(|m| !m.mempools_empty() || !m.lost.is_empty())
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let limit = self.cfg.rounds + self.cfg.max_drain_rounds;
        let mut r = 0u32;
        loop {
            if r >= limit {
                return Err(Error::IncompleteRun(format!(
                    "queues not drained after {} extra rounds",
                    self.cfg.max_drain_rounds
                )));
            }
            if self.epoch.is_none() && (r < self.cfg.rounds || self.sidechain_work()) {
                self.start_epoch(r)?;
            }
            if r < self.cfg.rounds {
                self.inject_traffic(r)?;
            }
            if self.epoch.is_some() {
                for j in 0..self.rho() {
                    self.tick(r, u64::from(r) * self.rho() + j)?;
                }
                let close = {
                    let ep = self.epoch.as_ref().expect("open");
                    r == ep.end_round || (r + 1 >= self.cfg.rounds && self.modules.iter().all(ModuleRt::mempools_empty))
                };
                if close {
                    self.close_epoch(r)?;
                }
            }
            self.mainchain_round(r)?;
            r += 1;
            let done = r >= self.cfg.rounds
                && self.epoch.is_none()
                && !self.sidechain_work()
                && self.modules.iter().all(|m| m.in_flight.is_empty())
                && self.main_outstanding == 0
                && self.main.mempool_len() == 0;
            if done {
                break;
            }
        }
        let end_tick = u64::from(r) * self.rho();
        let generated = self.generated;
        let rho = self.rho();
        self.obs(
            r,
            end_tick,
            "run".into(),
            ObsKind::RunEnd {
                main_rounds: u64::from(r),
                side_rounds: rho,
                generated,
            },
        )?;
        let report = self.store.report()?;
        let retained_metas = self
            .modules
            .iter()
            .flat_map(|m| m.subchains.iter().flat_map(|s| s.metas.iter().cloned()))
            .collect();
        let summaries = self
            .modules
            .iter()
            .flat_map(|m| m.summaries.iter().map(move |(e, s)| ((m.id, *e), s.clone())))
            .collect();
        Ok(RunOutput {
            report,
            final_state: self.main.confirmed_state().clone(),
            main_blocks: self.main.blocks()[..self.main.blocks().len() - self.main.unconfirmed_blocks()].to_vec(),
            genesis_state: self.genesis_state,
            store: self.store,
            syncs: self.syncs,
            metas: self.metas,
            retained_metas,
            summaries,
            subchain_plan: self.subchain_plan,
            meta_payment_total: self.meta_payment_total,
            escrow_created_total: self.escrow_created_total,
            epochs: self.next_epoch,
        })
    }

    fn inject_traffic(&mut self, r: u32) -> Result<()> {
        let epoch = self.epoch.as_ref().map_or(self.next_epoch, |e| e.index);
        let seed = self.cfg.seed;
        for tx in self.gen.gen_round_traffic(r) {
            self.generated += 1;
            match self.table.classify_prefix(tx.prefix)? {
                ChainTarget::Mainchain => {
                    self.main_outstanding += 1;
                    self.main.submit(tx);
                }
                ChainTarget::Sidechain(m) => {
                    let idx = self.module_index(m);
                    let module = &mut self.modules[idx];
                    let sub = route_to_subchain(tx.contract_id.unwrap_or(tx.id), epoch, seed, module.active);
                    module.arrivals_bytes += u64::from(tx.size_bytes);
                    module.subchains[sub as usize].mempool.push_back(tx);
                }
            }
        }
        Ok(())
    }

    fn refresh_scores(&mut self) -> Result<()> {
        let w = self.cfg.miners.weights;
        for m in &mut self.miners {
            m.score = crate::election::score::score_of(m.mining_power, m.participation as f64, m.disputes as f64, &w);
        }
        let pop: Vec<(f64, [u8; 32])> = self.miners.iter().map(|m| (m.score, m.pk)).collect();
        let classes = assign_classes(&pop, self.cfg.miners.classes as usize)?;
        for (m, c) in self.miners.iter_mut().zip(classes) {
            m.class = c;
        }
        Ok(())
    }

    /// Per module: number of sub-sidechains and the class composition of each committee.
    fn plan(&self) -> Result<Vec<(ModuleId, Vec<Vec<u64>>)>> {
        let weighted = self.cfg.committee.election == ElectionMode::Weighted;
        let classes = if weighted { self.cfg.miners.classes as usize } else { 1 };
        let k1 = u64::from(self.cfg.committee.backups + 1);
        let mut pool = vec![0u64; classes];
        for m in &self.miners {
            pool[if weighted { m.class - 1 } else { 0 }] += 1;
        }
        let quota = |m: ModuleId| -> Result<Vec<u64>> {
            if weighted {
                self.cfg.quota(m)
            } else {
                Ok(vec![u64::from(self.cfg.committee.size)])
            }
        };
        let mut plan: BTreeMap<ModuleId, Vec<Vec<u64>>> = BTreeMap::new();
        let mut heavy = Vec::new();
        for module in &self.modules {
            let q = quota(module.id)?;
            if module.requested <= 1 {
                for (p, x) in pool.iter_mut().zip(&q) {
                    *p = p.checked_sub(x * k1).ok_or(Error::QuotaInfeasible {
                        class: 1,
                        needed: x * k1,
                        available: *p,
                    })?;
                }
                plan.insert(module.id, vec![q]);
            } else {
                heavy.push(SubchainRequest {
                    module: module.id,
                    requested: module.requested,
                    quota: q.iter().map(|x| x * k1).collect(),
                });
            }
        }
        if !heavy.is_empty() {
            let min_size = match self.cfg.committee.min_size {
                0 => u64::from(self.cfg.committee.size) / 2,
                s => u64::from(s),
            };
            let grants = allocate_subchains(&heavy, &pool, min_size * k1).or_else(|_| {
                let single: Vec<SubchainRequest> = heavy.iter().map(|r| SubchainRequest { requested: 1, ..r.clone() }).collect();
                allocate_subchains(&single, &pool, min_size * k1)
            })?;
            for g in grants {
                let per: Vec<Vec<u64>> = g
                    .compositions
                    .iter()
                    .map(|c| c.iter().map(|x| x / k1).collect())
                    .collect();
                plan.insert(g.module, per);
            }
        }
        Ok(self.modules.iter().map(|m| (m.id, plan.remove(&m.id).expect("planned"))).collect())
    }

    fn start_epoch(&mut self, r: u32) -> Result<()> {
        let e = self.next_epoch;
        self.next_epoch += 1;
        self.refresh_scores()?;
        let plan = self.plan()?;
        let k1 = self.cfg.committee.backups + 1;
        let mut slots = Vec::new();
        let mut counts: Vec<Vec<u64>> = Vec::new();
        for (m, comps) in &plan {
            for (sub, comp) in comps.iter().enumerate() {
                for rank in 0..k1 {
                    slots.push(SlotId {
                        sidechain: SidechainId { module: *m, sub: sub as u8 },
                        rank,
                    });
                    if counts.is_empty() {
                        counts = vec![Vec::new(); comp.len()];
                    }
                    for (row, x) in counts.iter_mut().zip(comp) {
                        row.push(*x);
                    }
                }
            }
        }
        let seed1 = seed::derive(self.cfg.seed, "epoch-seed1", &[u64::from(e)]);
        let seed2 = seed::derive(self.cfg.seed, "epoch-seed2", &[u64::from(e)]);
        let eligible: Vec<MinerId> = (0..self.miners.len() as MinerId).collect();
        let seating: Seating = match self.cfg.committee.election {
            ElectionMode::Weighted => {
                let quotas = ClassQuota::new(slots.clone(), counts)?;
                sortition_weighted(&seed1, &seed2, &self.miners, &self.keys, &eligible, &quotas, self.exec)?
            }
            ElectionMode::Random => {
                let sized: Vec<(SlotId, u64)> = slots.iter().enumerate().map(|(i, s)| (*s, counts[0][i])).collect();
                sortition_random(&seed1, &self.miners, &self.keys, &eligible, &sized, self.exec)?
            }
        };
        let capacity = self.cfg.chains.side_capacity_bytes;
        let seed = self.cfg.seed;
        for (module, (m, comps)) in self.modules.iter_mut().zip(&plan) {
            debug_assert_eq!(module.id, *m);
            let n = comps.len() as u32;
            while module.subchains.len() < n as usize {
                let sub = module.subchains.len() as u8;
                module.subchains.push(SidechainState::new(SidechainId { module: *m, sub }, capacity));
            }
            for (sub, sc) in module.subchains.iter_mut().enumerate() {
                if (sub as u32) < n {
                    let committees = (0..k1)
                        .map(|rank| {
                            let slot = SlotId { sidechain: sc.id, rank };
                            let role = if rank == 0 { CommitteeRole::Primary } else { CommitteeRole::Backup(rank) };
                            Committee::new(sc.id, seating.get(&slot).cloned().unwrap_or_default(), role)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    sc.seat(committees);
                } else {
                    sc.seat(Vec::new());
                }
            }
            let mut pending: Vec<Transaction> = module.subchains.iter_mut().flat_map(|s| s.mempool.drain(..)).collect();
            pending.sort_by_key(|t| t.id);
            for tx in pending {
                let sub = route_to_subchain(tx.contract_id.unwrap_or(tx.id), e, seed, n);
                module.subchains[sub as usize].mempool.push_back(tx);
            }
            module.active = n;
            module.arrivals_bytes = 0;
            self.subchain_plan.insert((*m, e), n);
        }
        let end_round = r + self.cfg.epoch_rounds - 1;
        self.epoch = Some(OpenEpoch {
            index: e,
            end_round,
            last_tick: (u64::from(end_round) + 1) * self.rho() - 1,
        });
        Ok(())
    }

    fn tick(&mut self, r: u32, t: u64) -> Result<()> {
        let (epoch, last_tick) = {
            let ep = self.epoch.as_ref().expect("open epoch");
            (ep.index, ep.last_tick)
        };
        let mut forced_leader = BTreeSet::new();
        let mut forced_committee = BTreeSet::new();
        for ev in self.events.remove(&t).unwrap_or_default() {
            let (module, sub) = match &ev {
                ScriptedEvent::CommitteeFailure { module, sub, .. }
                | ScriptedEvent::LeaderFailure { module, sub, .. }
                | ScriptedEvent::Stall { module, sub, .. } => (module.clone(), *sub),
                ScriptedEvent::Rollback { .. } => continue,
            };
            let m = module_by_name(&self.table, &module).ok_or_else(|| Error::config("events.module", module.clone()))?;
            let id = SidechainId { module: m, sub: sub as u8 };
            match ev {
                ScriptedEvent::CommitteeFailure { .. } => {
                    forced_committee.insert(id);
                }
                ScriptedEvent::LeaderFailure { .. } => {
                    forced_leader.insert(id);
                }
                ScriptedEvent::Stall { duration, .. } => {
                    self.stalls.insert(id, t + u64::from(duration));
                }
                ScriptedEvent::Rollback { .. } => {}
            }
        }
        let last_block: BTreeMap<ModuleId, Option<u64>> = self
            .modules
            .iter()
            .map(|m| (m.id, m.subchains.iter().filter_map(|s| s.last_block_tick).max()))
            .collect();
        let eta = u64::from(self.cfg.recovery.eta);
        let gated: BTreeMap<ModuleId, bool> = self
            .modules
            .iter()
            .map(|m| {
                let d = gate_on_dependency(&self.graph, m.id, |x| last_block.get(&x).copied().flatten(), t, eta);
                (m.id, d == Directive::MineEmpty)
            })
            .collect();

        let main_state = self.main.confirmed_state();
        let behaviors = &self.behaviors;
        let strategy = self.cfg.committee.strategy;
        let step_in = self.cfg.step_in_ticks();
        let theta = self.cfg.committee.liveness_threshold as usize;
        let stalls = &self.stalls;
        let mut jobs: Vec<Job<'_>> = Vec::new();
        for module in self.modules.iter_mut() {
            let active = module.active as usize;
            let g = gated[&module.id];
            let ledger = &module.ledger;
            for sc in module.subchains.iter_mut().take(active) {
                let id = sc.id;
                jobs.push(Job {
                    stalled: stalls.get(&id).is_some_and(|&until| t < until),
                    force_leader: forced_leader.contains(&id),
                    force_committee: forced_committee.contains(&id),
                    sc,
                    ledger,
                    gated: g,
                    out: None,
                });
            }
        }
        self.exec.for_each_mut(&mut jobs, |job| {
            if job.stalled {
                return;
            }
            let ctx = TickContext {
                tick: t,
                epoch,
                epoch_last_tick: last_tick,
                gated: job.gated,
                force_leader_failure: job.force_leader,
                force_committee_failure: job.force_committee,
                behaviors,
                strategy,
                step_in_ticks: step_in,
                liveness_threshold: theta,
                view: ValidationView {
                    ledger: job.ledger,
                    main: main_state,
                },
            };
            job.out = Some(job.sc.produce_meta_block(&ctx));
        });
        let outputs: Vec<(SidechainId, bool, TickOutput)> = jobs
            .into_iter()
            .filter_map(|j| j.out.map(|o| (j.sc.id, j.gated, o)))
            .collect();
        let rho = self.rho();
        for (chain, gated, out) in outputs {
            let label = chain.to_string();
            for ev in &out.events {
                match *ev {
                    TickEvent::Block { bytes, txs, empty, .. } => {
                        self.obs(r, t, label.clone(), ObsKind::BlockProduced { bytes, txs: txs as u64, empty })?;
                        self.metas.push(MetaRecord {
                            chain,
                            epoch,
                            tick: t,
                            txs,
                            gated,
                        });
                    }
                    TickEvent::ViewChange { .. } => self.obs(r, t, label.clone(), ObsKind::ViewChange)?,
                    TickEvent::ConsensusFailure { rank } => {
                        self.obs(r, t, label.clone(), ObsKind::CommitteeFailed { rank: rank as u32 })?
                    }
                    TickEvent::Recovered { ticks } => self.obs(r, t, label.clone(), ObsKind::Recovered { ticks })?,
                    TickEvent::Failover { .. } | TickEvent::Exhausted | TickEvent::Idle => {}
                }
            }
            for tx in &out.finalized {
                if tx.kind == TxKind::ServicePayment {
                    self.meta_payment_total += tx.amount;
                }
                let latency = t + 1 - u64::from(tx.created_round) * rho;
                self.obs(
                    r,
                    t,
                    label.clone(),
                    ObsKind::TxConfirmed {
                        tx_id: tx.id,
                        latency_ticks: latency,
                        size: u64::from(tx.size_bytes),
                    },
                )?;
            }
            for tx in &out.rejected {
                self.obs(r, t, label.clone(), ObsKind::TxRejected { tx_id: tx.id })?;
            }
            if out.reads.foreign_pending > 0 {
                self.obs(
                    r,
                    t,
                    label.clone(),
                    ObsKind::CrossChainRead {
                        count: out.reads.foreign_pending,
                    },
                )?;
            }
        }
        Ok(())
    }

    fn close_epoch(&mut self, r: u32) -> Result<()> {
        let ep = self.epoch.take().expect("open epoch");
        let e = ep.index;
        let t = (u64::from(r) + 1) * self.rho() - 1;
        let per_cap = self.cfg.chains.side_capacity_bytes * self.cfg.ticks_per_epoch();
        let votes_theta = self.cfg.committee.liveness_threshold as usize;
        let sync_size = match self.cfg.committee.sync_size {
            0 => self.cfg.committee.size as usize,
            s => s as usize,
        };
        let sizes = self.cfg.traffic.sizes;
        let sync_prefix = self.table.annotate(TxKind::Sync)?;
        for idx in 0..self.modules.len() {
            let label = self.modules[idx].label();
            let m = self.modules[idx].id;
            {
                let module = &mut self.modules[idx];
                for sc in module.subchains.iter_mut() {
                    let delta = std::mem::take(&mut sc.delta);
                    module.ledger.merge(e, delta);
                }
            }
            let summary = produce_summary_block(m, e, self.modules[idx].metas_of(e));
            let bytes = summary.bytes();
            self.modules[idx].summaries.insert(e, summary);
            self.obs(r, t, label.clone(), ObsKind::SummaryStored { epoch: e, bytes })?;

            let module = &self.modules[idx];
            let active: Vec<&SidechainState> = module.subchains.iter().take(module.active as usize).collect();
            let stalled_now = active
                .iter()
                .any(|s| self.stalls.get(&s.id).is_some_and(|&until| t < until));
            let mut ok = !stalled_now && active.iter().all(|s| s.status == ChainStatus::Active);
            let issuer = if active.len() > 1 && ok {
                let subs: Vec<Committee> = active.iter().filter_map(|s| s.committee().cloned()).collect();
                let mut rng = seed::rng(self.cfg.seed, "sync-committee", &[u64::from(e), u64::from(m.0)]);
                let sync = elect_sync_committee(&subs, |id| self.miners[id as usize].class, sync_size, &mut rng)?;
                let honest = sync
                    .members
                    .iter()
                    .filter(|&&id| self.behaviors[id as usize] == Behavior::Honest)
                    .count();
                let needed = match votes_theta {
                    0 => sync.votes_needed(),
                    th => (sync.size() + 1).saturating_sub(th),
                };
                ok &= honest >= needed;
                sync.leader_id()
            } else {
                active.first().and_then(|s| s.committee()).map_or(0, Committee::leader_id)
            };

            // heavy detection and next request
            let blocks: u32 = active.iter().map(|s| s.stats.blocks).sum();
            let full: u32 = active.iter().map(|s| s.stats.full_blocks).sum();
            let all_full = blocks > 0 && full == blocks;
            let backlog: u64 = module.subchains.iter().map(SidechainState::mempool_bytes).sum();
            let n = module.active;
            let cap = module.cap;
            let requested = if cap <= 1 {
                1
            } else if detect_heavy(all_full, backlog, per_cap * u64::from(n), cap) > 1 || (n > 1 && all_full) {
                let demand = backlog + module.arrivals_bytes;
                (demand.div_ceil(per_cap.max(1)) as u32).clamp(1, cap)
            } else {
                1
            };

            // credit and blame
            let mut credit = Vec::new();
            let mut blame = Vec::new();
            for sc in &active {
                for &rank in &sc.served {
                    credit.extend(
                        sc.committees[rank]
                            .members
                            .iter()
                            .copied()
                            .filter(|&id| self.behaviors[id as usize] != Behavior::Lazy),
                    );
                }
                for &rank in &sc.failed {
                    blame.extend(
                        sc.committees[rank]
                            .members
                            .iter()
                            .copied()
                            .filter(|&id| self.behaviors[id as usize].misbehaving()),
                    );
                }
            }
            for id in credit {
                self.miners[id as usize].participation += 1;
            }
            for id in blame {
                self.miners[id as usize].disputes += 1;
            }

            let module = &mut self.modules[idx];
            module.requested = requested;
            if ok {
                let mut epochs = std::mem::take(&mut module.lost);
                epochs.insert(e);
                let sync = mass_sync(m, &epochs, &module.summaries, &module.pruned, issuer, requested)?;
                let carrier = Transaction {
                    id: self.next_sys_id,
                    prefix: sync_prefix,
                    kind: TxKind::Sync,
                    contract_id: None,
                    issuer,
                    amount: 0,
                    valid: true,
                    size_bytes: sizes.sync_size(sync.entry_count()),
                    created_round: r,
                    payload: Payload::Sync(sync.sync_ref()),
                };
                self.next_sys_id += 1;
                for &x in &epochs {
                    module.in_flight.insert(x, r);
                }
                self.sync_issued.insert((m, e), r);
                self.main.submit_sync(carrier, sync);
            } else {
                module.lost.insert(e);
            }
        }
        Ok(())
    }

    fn mainchain_round(&mut self, r: u32) -> Result<()> {
        let rho = self.rho();
        let t = (u64::from(r) + 1) * rho - 1;
        let modules = &self.modules;
        let (block, outcome) = self.main.produce_main_block(r, |sync| {
            modules
                .iter()
                .find(|m| m.id == sync.module)
                .is_some_and(|m| verify_sync_tx(sync, |e| m.metas_of(e).collect::<Vec<_>>()))
        })?;
        self.obs(
            r,
            t,
            "main".into(),
            ObsKind::BlockProduced {
                bytes: block.bytes(),
                txs: block.txs.len() as u64,
                empty: block.txs.is_empty(),
            },
        )?;
        for tx in outcome.rejected {
            self.main_outstanding -= 1;
            self.obs(r, t, "main".into(), ObsKind::TxRejected { tx_id: tx.id })?;
        }
        for sync in outcome.rejected_syncs {
            let idx = self.module_index(sync.module);
            for e in sync.epochs() {
                self.modules[idx].in_flight.remove(&e);
                self.modules[idx].lost.insert(e);
            }
        }
        if let Some(depth) = self.rollbacks.remove(&r) {
            let dropped = self.main.rollback(depth as usize)?;
            let mut hit = BTreeSet::new();
            for sync in dropped.syncs() {
                hit.insert(sync.module);
                let idx = self.module_index(sync.module);
                for e in sync.epochs() {
                    self.modules[idx].in_flight.remove(&e);
                    self.modules[idx].lost.insert(e);
                }
            }
            for m in hit {
                let idx = self.module_index(m);
                for sync in self.main.withdraw_syncs(m) {
                    for e in sync.epochs() {
                        self.modules[idx].in_flight.remove(&e);
                        self.modules[idx].lost.insert(e);
                    }
                }
            }
        }
        for h in self.main.confirm()? {
            let block = self.main.blocks()[h].clone();
            for tx in block.txs.iter().filter(|t| t.kind != TxKind::Sync) {
                self.main_outstanding -= 1;
                if tx.kind == TxKind::EscrowCreate {
                    self.escrow_created_total += tx.amount;
                }
                let latency = (u64::from(r) + 1) * rho - u64::from(tx.created_round) * rho;
                self.obs(
                    r,
                    t,
                    "main".into(),
                    ObsKind::TxConfirmed {
                        tx_id: tx.id,
                        latency_ticks: latency,
                        size: u64::from(tx.size_bytes),
                    },
                )?;
            }
            for sync in &block.syncs {
                let idx = self.module_index(sync.module);
                let epochs: Vec<u32> = sync.epochs().collect();
                let issued = epochs
                    .iter()
                    .filter_map(|e| self.modules[idx].in_flight.get(e).copied())
                    .min()
                    .unwrap_or(r);
                self.syncs.push(SyncRecord {
                    module: sync.module,
                    epochs: epochs.clone(),
                    issued_round: issued,
                    confirmed_round: r,
                    requested_subchains: sync.requested_subchains,
                });
                self.modules[idx].ledger.clear_debits(epochs.iter().copied());
                let label = self.modules[idx].label();
                for &e in &epochs {
                    self.modules[idx].in_flight.remove(&e);
                    self.obs(r, t, label.clone(), ObsKind::SyncConfirmed { epoch: e })?;
                    if self.cfg.chains.prune {
                        for (chain, freed) in self.prune(idx, e)? {
                            if freed > 0 {
                                self.obs(r, t, chain, ObsKind::Pruned { epoch: e, bytes_freed: freed })?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Remove the epoch's meta-blocks from every sub-sidechain of a module.
    fn prune(&mut self, idx: usize, epoch: u32) -> Result<Vec<(String, u64)>> {
        let m = self.modules[idx].id;
        if !self.main.confirmed_state().is_synced(m, epoch) {
            return Err(Error::PruneBeforeConfirm {
                chain: SidechainId::primary(m),
                epoch,
            });
        }
        let module = &mut self.modules[idx];
        module.pruned.insert(epoch);
        Ok(module
            .subchains
            .iter_mut()
            .map(|s| (s.id.to_string(), s.prune_epoch(epoch)))
            .collect())
    }
}

/// Rebuild mainchain state from genesis by replaying confirmed main blocks,
/// recomputing every synced summary from the retained meta-blocks.
pub fn replay_state(genesis: &LedgerState, blocks: &[MainBlock], metas: &[MetaBlock]) -> Result<LedgerState> {
    let mut state = genesis.clone();
    for block in blocks {
        for sync in &block.syncs {
            let summaries = sync
                .epochs()
                .map(|e| {
                    produce_summary_block(
                        sync.module,
                        e,
                        metas.iter().filter(|m| m.sidechain.module == sync.module && m.epoch == e),
                    )
                })
                .collect();
            state.apply_sync(&create_sync_tx(summaries, sync.issuer, sync.requested_subchains))?;
        }
        for tx in block.txs.iter().filter(|t| t.kind != TxKind::Sync) {
            state.apply_tx(tx)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.miners.count = 120;
        c.committee.size = 10;
        c.committee.backups = 1;
        c.traffic.contracts_per_node = 1;
        c.rounds = 12;
        c.epoch_rounds = 4;
        c
    }

    #[test]
    fn tiny_run_drains_and_syncs() {
        let out = run_experiment(&tiny(), Exec::Sequential).unwrap();
        let r = &out.report;
        assert!(r.generated > 0);
        assert_eq!(r.confirmed + r.rejected, r.generated);
        assert_eq!(r.cross_chain_reads, 0);
        // one sync per module per epoch
        for m in [ModuleId::MATCH, ModuleId::PAYMENT, ModuleId::DISPUTE] {
            let epochs: Vec<u32> = out.syncs.iter().filter(|s| s.module == m).flat_map(|s| s.epochs.clone()).collect();
            assert_eq!(epochs, (0..out.epochs).collect::<Vec<_>>());
        }
        assert!(out.retained_metas.is_empty());
        let vars = &out.final_state.vars;
        assert_eq!(vars.payments.values().sum::<u64>(), out.meta_payment_total);
    }

    #[test]
    fn deterministic() {
        let a = run_experiment(&tiny(), Exec::Sequential).unwrap();
        let b = run_experiment(&tiny(), Exec::Parallel).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.store.observations(), b.store.observations());
    }

    #[test]
    fn prune_replay_equivalence() {
        let a = run_experiment(&tiny(), Exec::Sequential).unwrap();
        let mut c = tiny();
        c.chains.prune = false;
        let b = run_experiment(&c, Exec::Sequential).unwrap();
        assert!(!b.retained_metas.is_empty());
        let replayed = replay_state(&b.genesis_state, &b.main_blocks, &b.retained_metas).unwrap();
        assert_eq!(replayed.vars, a.final_state.vars);
        assert_eq!(replayed, b.final_state);
    }
}

//! State-sharded comparison chain. Every transaction lands on a home shard
//! and is forwarded to each shard holding one of its input records before
//! it can be processed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::chains::mainchain::LedgerState;
use crate::chains::sidechain::{validate_tx, LedgerDelta, ModuleLedger, ReadLog, ValidationView};
use crate::config::ScenarioConfig;
use crate::election::sortition::sortition_random;
use crate::election::SlotId;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{MetricsStore, ObsKind, Observation};
use crate::orchestrator::{build_miners, run_id, RunOutput};
use crate::seed;
use crate::traffic::{ModuleTable, TrafficGenerator};
use crate::types::{Behavior, ContractId, ModuleId, SidechainId, Transaction, TxKind, META_HEADER_BYTES};

/// Shards currently holding each record of a contract.
#[derive(Debug, Clone, Default)]
struct Lineage {
    deal: Option<u32>,
    escrow: Option<u32>,
    last_proof: Option<u32>,
    last_ask: Option<u32>,
    last_offer: Option<u32>,
}

impl Lineage {
    fn inputs(&self, kind: TxKind) -> BTreeSet<u32> {
        let recs = match kind {
            TxKind::Ask | TxKind::Transfer | TxKind::Sync => vec![],
            TxKind::Offer => vec![self.last_ask],
            TxKind::Agreement => vec![self.last_ask, self.last_offer],
            TxKind::EscrowCreate => vec![self.deal],
            TxKind::ServiceProof => vec![self.deal, self.escrow],
            TxKind::ServicePayment => vec![self.deal, self.escrow, self.last_proof],
            TxKind::Dispute => vec![self.last_proof, self.deal],
        };
        recs.into_iter().flatten().collect()
    }

    fn record(&mut self, kind: TxKind, shard: u32) {
        match kind {
            TxKind::Ask => self.last_ask = Some(shard),
            TxKind::Offer => self.last_offer = Some(shard),
            TxKind::Agreement => self.deal = Some(shard),
            TxKind::EscrowCreate => self.escrow = Some(shard),
            TxKind::ServiceProof => self.last_proof = Some(shard),
            TxKind::ServicePayment | TxKind::Dispute | TxKind::Transfer | TxKind::Sync => {}
        }
    }
}

#[derive(Debug, Default)]
struct Shard {
    mempool: VecDeque<Transaction>,
    inbox: Vec<Transaction>,
    live: bool,
}

fn shard_of(seed: u64, label: &str, key: u64, shards: u32) -> u32 {
    (seed::hash_u64(seed, label, &[key]) % u64::from(shards)) as u32
}

/// Run the market on `shards` state shards with one block per sidechain
/// round per shard. Blocks are never pruned.
pub fn run_sharded_market(cfg: &ScenarioConfig, shards: u32, exec: Exec) -> Result<RunOutput> {
    if shards == 0 {
        return Err(Error::config("shards", "must be at least 1"));
    }
    let s_c = u64::from(cfg.committee.size);
    if u64::from(shards) * s_c > u64::from(cfg.miners.count) {
        return Err(Error::config("shards", "shards * committee.size exceeds miners.count"));
    }
    let table = ModuleTable::chainscale();
    let (miners, keys, behaviors) = build_miners(cfg)?;
    let mut gen = TrafficGenerator::new(
        cfg.traffic.clone(),
        table,
        cfg.miners.count,
        cfg.contracts(),
        cfg.epoch_rounds,
        cfg.seed,
    );
    let genesis_state = LedgerState::from_genesis(&gen.genesis());
    let mut state = genesis_state.clone();
    let mut ledger = ModuleLedger::default();
    let mut lineage: BTreeMap<ContractId, Lineage> = BTreeMap::new();
    for c in gen.contracts() {
        let home = shard_of(cfg.seed, "contract-home", c.contract_id, shards);
        lineage.insert(
            c.contract_id,
            Lineage {
                escrow: state.escrows.contains_key(&c.contract_id).then_some(home),
                ..Lineage::default()
            },
        );
    }
    let theta = cfg.committee.liveness_threshold as usize;
    let rho = u64::from(cfg.side_rounds);
    let capacity = cfg.chains.side_capacity_bytes;
    let mut store = MetricsStore::new(run_id(cfg));
    let mut shard_state: Vec<Shard> = (0..shards).map(|_| Shard::default()).collect();
    let eligible: Vec<u32> = (0..miners.len() as u32).collect();
    let mut pending: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    let mut generated = 0u64;
    let mut outstanding = 0u64;
    let limit = cfg.rounds + cfg.max_drain_rounds;
    let mut r = 0u32;
    let mut epoch = 0u32;
    loop {
        if r >= limit {
            return Err(Error::IncompleteRun("sharded queues not drained".into()));
        }
        if r % cfg.epoch_rounds == 0 {
            let seed1 = seed::derive(cfg.seed, "shard-seed", &[u64::from(epoch)]);
            let slots: Vec<(SlotId, u64)> = (0..shards)
                .map(|s| {
                    let id = SidechainId {
                        module: ModuleId(0),
                        sub: s as u8,
                    };
                    (SlotId { sidechain: id, rank: 0 }, s_c)
                })
                .collect();
            let seating = sortition_random(&seed1, &miners, &keys, &eligible, &slots, exec)?;
            for (i, (slot, _)) in slots.iter().enumerate() {
                let members = &seating[slot];
                let honest = members.iter().filter(|&&m| behaviors[m as usize] == Behavior::Honest).count();
                let needed = match theta {
                    0 => 2 * crate::types::max_faulty(members.len()) + 2,
                    th => (members.len() + 1).saturating_sub(th),
                };
                shard_state[i].live = honest >= needed.min(members.len());
                if !shard_state[i].live {
                    store.record(Observation {
                        round: r,
                        tick: u64::from(r) * rho,
                        chain: format!("shard{i}"),
                        kind: ObsKind::CommitteeFailed { rank: 0 },
                    })?;
                }
            }
            epoch += 1;
        }
        if r < cfg.rounds {
            for tx in gen.gen_round_traffic(r) {
                generated += 1;
                outstanding += 1;
                let home = shard_of(cfg.seed, "tx-home", tx.id, shards);
                shard_state[home as usize].mempool.push_back(tx);
            }
        }
        for j in 0..rho {
            let t = u64::from(r) * rho + j;
            for sh in shard_state.iter_mut() {
                let arrived = std::mem::take(&mut sh.inbox);
                sh.mempool.extend(arrived);
            }
            let mut forwards: Vec<(u32, Transaction)> = Vec::new();
            for i in 0..shards {
                let label = format!("shard{i}");
                let sh = &mut shard_state[i as usize];
                if !sh.live {
                    continue;
                }
                let mut used = 0u64;
                let mut block_txs = 0u64;
                let mut keep = VecDeque::new();
                while let Some(tx) = sh.mempool.pop_front() {
                    let size = u64::from(tx.size_bytes);
                    if used + size > capacity {
                        keep.push_back(tx);
                        keep.extend(sh.mempool.drain(..));
                        break;
                    }
                    used += size;
                    block_txs += 1;
                    let inputs = tx
                        .contract_id
                        .and_then(|c| lineage.get(&c))
                        .map(|l| l.inputs(tx.kind))
                        .unwrap_or_default();
                    let visited = pending.entry(tx.id).or_default();
                    visited.push(i);
                    let next = inputs.iter().copied().find(|s| !visited.contains(s));
                    if let Some(next) = next {
                        store.record(Observation {
                            round: r,
                            tick: t,
                            chain: label.clone(),
                            kind: ObsKind::CrossChainForward { tx_id: tx.id },
                        })?;
                        forwards.push((next, tx));
                        continue;
                    }
                    pending.remove(&tx.id);
                    outstanding -= 1;
                    let ok = match tx.kind {
                        TxKind::Transfer | TxKind::EscrowCreate => {
                            let ok = state.check_tx(&tx);
                            if ok {
                                state.apply_tx(&tx)?;
                            }
                            ok
                        }
                        _ => {
                            let mut delta = LedgerDelta::default();
                            let mut log = ReadLog::default();
                            let ok = validate_tx(
                                &tx,
                                ValidationView {
                                    ledger: &ledger,
                                    main: &state,
                                },
                                &mut delta,
                                &mut log,
                            );
                            ledger.merge(epoch, delta);
                            ok
                        }
                    };
                    let kind = if ok {
                        if let Some(c) = tx.contract_id {
                            lineage.entry(c).or_default().record(tx.kind, i);
                        }
                        ObsKind::TxConfirmed {
                            tx_id: tx.id,
                            latency_ticks: t + 1 - u64::from(tx.created_round) * rho,
                            size,
                        }
                    } else {
                        ObsKind::TxRejected { tx_id: tx.id }
                    };
                    store.record(Observation {
                        round: r,
                        tick: t,
                        chain: label.clone(),
                        kind,
                    })?;
                }
                sh.mempool = keep;
                store.record(Observation {
                    round: r,
                    tick: t,
                    chain: label,
                    kind: ObsKind::BlockProduced {
                        bytes: META_HEADER_BYTES + used,
                        txs: block_txs,
                        empty: block_txs == 0,
                    },
                })?;
            }
            for (dest, tx) in forwards {
                shard_state[dest as usize].inbox.push(tx);
            }
        }
        r += 1;
        if r >= cfg.rounds && outstanding == 0 {
            break;
        }
    }
    store.record(Observation {
        round: r,
        tick: u64::from(r) * rho,
        chain: "run".into(),
        kind: ObsKind::RunEnd {
            main_rounds: u64::from(r),
            side_rounds: rho,
            generated,
        },
    })?;
    let report = store.report()?;
    Ok(RunOutput {
        report,
        store,
        final_state: state,
        genesis_state,
        main_blocks: Vec::new(),
        syncs: Vec::new(),
        metas: Vec::new(),
        retained_metas: Vec::new(),
        summaries: BTreeMap::new(),
        subchain_plan: BTreeMap::new(),
        meta_payment_total: 0,
        escrow_created_total: 0,
        epochs: epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_inputs() {
        let l = Lineage {
            deal: Some(1),
            escrow: Some(2),
            last_proof: Some(3),
            last_ask: Some(0),
            last_offer: None,
        };
        assert!(l.inputs(TxKind::Ask).is_empty());
        assert_eq!(l.inputs(TxKind::Agreement), BTreeSet::from([0]));
        assert_eq!(l.inputs(TxKind::ServicePayment), BTreeSet::from([1, 2, 3]));
    }

    #[test]
    fn sharded_run_forwards_and_drains() {
        let mut c = ScenarioConfig::default();
        c.miners.count = 200;
        c.committee.size = 10;
        c.traffic.contracts_per_node = 1;
        c.rounds = 12;
        c.epoch_rounds = 4;
        let out = run_sharded_market(&c, 4, Exec::Sequential).unwrap();
        let r = &out.report;
        assert_eq!(r.confirmed + r.rejected, r.generated);
        assert!(r.ctr_percent > 0.0);
        let one = run_sharded_market(&c, 1, Exec::Sequential).unwrap();
        assert_eq!(one.report.ctr_percent, 0.0);
    }
}

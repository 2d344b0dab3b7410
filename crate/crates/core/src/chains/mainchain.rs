//! Mainchain: balances, escrows, summary state variables, block production,
//! confirmation depth and scripted rollbacks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::traffic::Genesis;
use crate::types::{
    ContractId, MainBlock, ModuleId, Outcome, Party, Payload, SyncTransaction, Terms, Transaction, TxId, TxKind,
};

/// Per-module summary state variables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateVars {
    pub por_counts: BTreeMap<ContractId, u64>,
    pub payments: BTreeMap<ContractId, u64>,
    pub disputes: BTreeMap<ContractId, (TxId, Outcome)>,
    pub matches: BTreeMap<ContractId, Terms>,
    pub sanctioned: BTreeSet<ContractId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerState {
    pub vars: StateVars,
    pub balances: BTreeMap<Party, u64>,
    pub escrows: BTreeMap<ContractId, u64>,
    pub servers: BTreeMap<ContractId, Party>,
    pub synced: BTreeMap<ModuleId, BTreeSet<u32>>,
}

impl LedgerState {
    pub fn from_genesis(g: &Genesis) -> Self {
        LedgerState {
            balances: g.balances.clone(),
            escrows: g.escrows.clone(),
            servers: g.servers.clone(),
            ..LedgerState::default()
        }
    }

    pub fn is_synced(&self, module: ModuleId, epoch: u32) -> bool {
        self.synced.get(&module).is_some_and(|s| s.contains(&epoch))
    }

    /// Balance guard for mainchain-routed transactions.
    pub fn check_tx(&self, tx: &Transaction) -> bool {
        match tx.kind {
            TxKind::Transfer | TxKind::EscrowCreate => {
                self.balances.get(&tx.issuer).copied().unwrap_or(0) >= tx.amount
            }
            _ => false,
        }
    }

    pub fn apply_tx(&mut self, tx: &Transaction) -> Result<()> {
        if !self.check_tx(tx) {
            return Err(Error::Invariant(format!("applying invalid mainchain tx {}", tx.id)));
        }
        *self.balances.entry(tx.issuer).or_default() -= tx.amount;
        match (tx.kind, tx.payload) {
            (TxKind::Transfer, Payload::Transfer { to }) => *self.balances.entry(to).or_default() += tx.amount,
            (TxKind::EscrowCreate, _) => {
                let cid = tx
                    .contract_id
                    .ok_or_else(|| Error::Invariant(format!("escrow tx {} without contract", tx.id)))?;
                *self.escrows.entry(cid).or_default() += tx.amount;
            }
            _ => return Err(Error::Invariant(format!("malformed mainchain tx {}", tx.id))),
        }
        Ok(())
    }

    pub fn apply_sync(&mut self, sync: &SyncTransaction) -> Result<()> {
        for summary in &sync.summaries {
            if !self.synced.entry(summary.module).or_default().insert(summary.epoch) {
                return Err(Error::Invariant(format!(
                    "epoch {} of module {} synced twice",
                    summary.epoch, summary.module
                )));
            }
            for (&cid, e) in &summary.entries {
                if e.por_count > 0 {
                    *self.vars.por_counts.entry(cid).or_default() += e.por_count;
                }
                if e.payment_total > 0 {
                    let escrow = self.escrows.entry(cid).or_default();
                    if *escrow < e.payment_total {
                        return Err(Error::Invariant(format!(
                            "payment {} for contract {cid} exceeds escrow {}",
                            e.payment_total, *escrow
                        )));
                    }
                    *escrow -= e.payment_total;
                    let server = self.servers.get(&cid).copied().ok_or_else(|| {
                        Error::Invariant(format!("payment for unknown contract {cid}"))
                    })?;
                    *self.balances.entry(server).or_default() += e.payment_total;
                    *self.vars.payments.entry(cid).or_default() += e.payment_total;
                }
                if let Some((proof, outcome)) = e.dispute_outcome {
                    self.vars.disputes.insert(cid, (proof, outcome));
                    if outcome == Outcome::Penalize {
                        self.vars.sanctioned.insert(cid);
                    }
                }
                if let Some(terms) = e.match_record {
                    self.vars.matches.insert(cid, terms);
                    self.servers.insert(cid, terms.server);
                }
            }
        }
        Ok(())
    }

    pub fn apply_block(&mut self, block: &MainBlock) -> Result<()> {
        for s in &block.syncs {
            self.apply_sync(s)?;
        }
        for tx in block.txs.iter().filter(|t| t.kind != TxKind::Sync) {
            self.apply_tx(tx)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct BlockOutcome {
    pub rejected: Vec<Transaction>,
    pub rejected_syncs: Vec<SyncTransaction>,
}

#[derive(Debug, Default)]
pub struct RolledBack {
    pub blocks: Vec<MainBlock>,
}

impl RolledBack {
    pub fn syncs(&self) -> impl Iterator<Item = &SyncTransaction> {
        self.blocks.iter().flat_map(|b| &b.syncs)
    }
}

#[derive(Debug, Clone)]
pub struct Mainchain {
    blocks: Vec<MainBlock>,
    confirmed_height: usize,
    confirmed: LedgerState,
    tip: LedgerState,
    mempool: VecDeque<Transaction>,
    sync_pool: VecDeque<(Transaction, SyncTransaction)>,
    capacity: u64,
    depth: usize,
}

impl Mainchain {
    pub fn new(genesis: LedgerState, capacity: u64, depth: usize) -> Self {
        Mainchain {
            blocks: Vec::new(),
            confirmed_height: 0,
            confirmed: genesis.clone(),
            tip: genesis,
            mempool: VecDeque::new(),
            sync_pool: VecDeque::new(),
            capacity,
            depth: depth.max(1),
        }
    }

    pub fn submit(&mut self, tx: Transaction) {
        self.mempool.push_back(tx);
    }

    pub fn submit_sync(&mut self, carrier: Transaction, sync: SyncTransaction) {
        self.sync_pool.push_back((carrier, sync));
    }

    /// Drop queued (not yet included) syncs of `module`.
    pub fn withdraw_syncs(&mut self, module: ModuleId) -> Vec<SyncTransaction> {
        let (out, keep): (Vec<_>, Vec<_>) = self.sync_pool.drain(..).partition(|(_, s)| s.module == module);
        self.sync_pool = keep.into();
        out.into_iter().map(|(_, s)| s).collect()
    }

    pub fn pending_syncs(&self) -> impl Iterator<Item = &SyncTransaction> {
        self.sync_pool.iter().map(|(_, s)| s)
    }

    /// Sync-transactions first in FIFO order, then mempool transactions
    /// first-fit in FIFO order. Transactions failing the balance guard are
    /// dropped and reported.
    pub fn produce_main_block(
        &mut self,
        round: u32,
        verify_sync: impl Fn(&SyncTransaction) -> bool,
    ) -> Result<(MainBlock, BlockOutcome)> {
        let mut out = BlockOutcome::default();
        let mut block = MainBlock {
            round,
            txs: Vec::new(),
            syncs: Vec::new(),
            capacity_bytes: self.capacity,
        };
        let mut room = self.capacity;
        while let Some((carrier, sync)) = self.sync_pool.front() {
            if !verify_sync(sync) {
                let (_, s) = self.sync_pool.pop_front().expect("front exists");
                out.rejected_syncs.push(s);
                continue;
            }
            if u64::from(carrier.size_bytes) > room {
                break;
            }
            let (carrier, sync) = self.sync_pool.pop_front().expect("front exists");
            self.tip.apply_sync(&sync)?;
            room -= u64::from(carrier.size_bytes);
            block.txs.push(carrier);
            block.syncs.push(sync);
        }
        let mut keep = VecDeque::with_capacity(self.mempool.len());
        for tx in self.mempool.drain(..) {
            let size = u64::from(tx.size_bytes);
            if size > room {
                keep.push_back(tx);
            } else if !self.tip.check_tx(&tx) {
                out.rejected.push(tx);
            } else {
                self.tip.apply_tx(&tx)?;
                room -= size;
                block.txs.push(tx);
            }
        }
        self.mempool = keep;
        self.blocks.push(block.clone());
        Ok((block, out))
    }

    /// Fold every block that reached the confirmation depth into the
    /// confirmed state; returns their heights.
    pub fn confirm(&mut self) -> Result<Vec<usize>> {
        let mut done = Vec::new();
        while self.blocks.len() - self.confirmed_height >= self.depth {
            self.confirmed.apply_block(&self.blocks[self.confirmed_height])?;
            done.push(self.confirmed_height);
            self.confirmed_height += 1;
        }
        Ok(done)
    }

    /// Discard the last `depth` unconfirmed blocks. Their ordinary
    /// transactions return to the front of the mempool.
    pub fn rollback(&mut self, depth: usize) -> Result<RolledBack> {
        let unconfirmed = self.blocks.len() - self.confirmed_height;
        if depth >= self.depth || depth > unconfirmed {
            return Err(Error::config(
                "events.depth",
                format!(
                    "rollback depth {depth} must stay below the confirmation depth {} ({unconfirmed} unconfirmed blocks)",
                    self.depth
                ),
            ));
        }
        let cut = self.blocks.len() - depth;
        let dropped: Vec<MainBlock> = self.blocks.split_off(cut);
        for tx in dropped.iter().rev().flat_map(|b| b.txs.iter().rev()) {
            if tx.kind != TxKind::Sync {
                self.mempool.push_front(tx.clone());
            }
        }
        self.tip = self.confirmed.clone();
        for b in &self.blocks[self.confirmed_height..] {
            self.tip.apply_block(b)?;
        }
        Ok(RolledBack { blocks: dropped })
    }

    pub fn blocks(&self) -> &[MainBlock] {
        &self.blocks
    }

    pub fn confirmed_state(&self) -> &LedgerState {
        &self.confirmed
    }

    pub fn tip_state(&self) -> &LedgerState {
        &self.tip
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len() + self.sync_pool.len()
    }

    pub fn confirmation_depth(&self) -> usize {
        self.depth
    }

    pub fn unconfirmed_blocks(&self) -> usize {
        self.blocks.len() - self.confirmed_height
    }

    pub fn storage_bytes(&self) -> u64 {
        self.blocks.iter().map(MainBlock::bytes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::summary::create_sync_tx;
    use crate::types::{SummaryBlock, SummaryEntry, SyncRef, TxSizes};

    fn transfer(id: u64, from: Party, amount: u64) -> Transaction {
        Transaction {
            id,
            prefix: 0,
            kind: TxKind::Transfer,
            contract_id: None,
            issuer: from,
            amount,
            valid: true,
            size_bytes: 100,
            created_round: 0,
            payload: Payload::Transfer { to: 9 },
        }
    }

    fn genesis() -> LedgerState {
        let mut g = Genesis::default();
        g.balances.insert(1, 1000);
        g.escrows.insert(7, 50);
        g.servers.insert(7, 2);
        LedgerState::from_genesis(&g)
    }

    fn sync_with_payment(epoch: u32, amount: u64) -> (Transaction, SyncTransaction) {
        let mut entries = BTreeMap::new();
        entries.insert(
            7,
            SummaryEntry {
                por_count: 2,
                payment_total: amount,
                ..Default::default()
            },
        );
        let s = create_sync_tx(
            vec![SummaryBlock {
                module: ModuleId::PAYMENT,
                epoch,
                entries,
                covered_rounds: None,
            }],
            0,
            1,
        );
        let carrier = Transaction {
            id: 1000 + u64::from(epoch),
            prefix: 0,
            kind: TxKind::Sync,
            contract_id: None,
            issuer: 0,
            amount: 0,
            valid: true,
            size_bytes: TxSizes::default().sync_size(1),
            created_round: 0,
            payload: Payload::Sync(SyncRef {
                module: ModuleId::PAYMENT,
                first_epoch: epoch,
                last_epoch: epoch,
                entries: 1,
                digest: 0,
            }),
        };
        (carrier, s)
    }

    #[test]
    fn syncs_first_and_balance_guard() {
        let mut m = Mainchain::new(genesis(), 1 << 20, 1);
        for i in 0..5 {
            m.submit(transfer(i, 1, 10));
        }
        m.submit(transfer(5, 3, 10));
        let (c, s) = sync_with_payment(0, 30);
        m.submit_sync(c, s);
        let (b, out) = m.produce_main_block(0, |_| true).unwrap();
        assert_eq!(b.txs[0].kind, TxKind::Sync);
        assert_eq!(b.txs.len(), 6);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(m.confirm().unwrap(), vec![0]);
        let st = m.confirmed_state();
        assert_eq!(st.escrows[&7], 20);
        assert_eq!(st.balances[&2], 30);
        assert_eq!(st.balances[&1], 950);
        assert!(st.is_synced(ModuleId::PAYMENT, 0));
    }

    #[test]
    fn empty_mempool_gives_empty_block() {
        let mut m = Mainchain::new(genesis(), 1 << 20, 1);
        let (b, _) = m.produce_main_block(0, |_| true).unwrap();
        assert!(b.txs.is_empty());
    }

    #[test]
    fn overdrawn_escrow_is_an_invariant_violation() {
        let mut m = Mainchain::new(genesis(), 1 << 20, 1);
        let (c, s) = sync_with_payment(0, 51);
        m.submit_sync(c, s);
        assert!(matches!(m.produce_main_block(0, |_| true), Err(Error::Invariant(_))));
    }

    #[test]
    fn rollback_requeues_and_restores() {
        let mut m = Mainchain::new(genesis(), 1 << 20, 3);
        m.submit(transfer(1, 1, 10));
        m.produce_main_block(0, |_| true).unwrap();
        let (c, s) = sync_with_payment(0, 30);
        m.submit_sync(c, s);
        m.submit(transfer(2, 1, 10));
        m.produce_main_block(1, |_| true).unwrap();
        assert!(m.confirm().unwrap().is_empty());
        assert!(m.rollback(3).is_err());
        let rb = m.rollback(2).unwrap();
        assert_eq!(rb.syncs().count(), 1);
        assert_eq!(m.tip_state(), &genesis());
        assert_eq!(m.mempool_len(), 2);
        let (b, _) = m.produce_main_block(2, |_| true).unwrap();
        assert_eq!(b.txs.iter().map(|t| t.id).collect::<Vec<_>>(), vec![1, 2]);
    }
}

//! Routing table and the storage-market workload generator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{
    ContractId, ModuleId, Outcome, Party, Payload, Terms, Transaction, TxKind, TxSizes,
};

pub const MAINCHAIN_PREFIX: u8 = 0x00;
const SIDECHAIN_BITS: u8 = 0b1100_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChainTarget {
    Mainchain,
    Sidechain(ModuleId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: ModuleId,
    pub name: String,
    pub types: Vec<TxKind>,
}

/// Which chain owns each transaction type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleTable {
    modules: Vec<ModuleSpec>,
    mainchain: Vec<TxKind>,
}

impl ModuleTable {
    pub fn new(modules: Vec<ModuleSpec>, mainchain: Vec<TxKind>) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::BadModuleTable("no modules".into()));
        }
        let mut ids = BTreeSet::new();
        let mut owner: BTreeMap<TxKind, String> = BTreeMap::new();
        for m in &modules {
            if m.id.0 == 0 || m.id.0 > 0x3F {
                return Err(Error::BadModuleTable(format!("module id {} outside 1..=63", m.id.0)));
            }
            if !ids.insert(m.id) {
                return Err(Error::BadModuleTable(format!("module id {} used twice", m.id.0)));
            }
            for &k in &m.types {
                if !k.is_service() {
                    return Err(Error::BadModuleTable(format!("{k} cannot live on a sidechain")));
                }
                if let Some(prev) = owner.insert(k, m.name.clone()) {
                    return Err(Error::BadModuleTable(format!(
                        "{k} assigned to both {prev} and {}",
                        m.name
                    )));
                }
            }
        }
        for &k in &mainchain {
            if owner.insert(k, "mainchain".into()).is_some() {
                return Err(Error::BadModuleTable(format!("{k} assigned twice")));
            }
        }
        if let Some(k) = TxKind::SERVICE.iter().find(|k| !owner.contains_key(k)) {
            return Err(Error::BadModuleTable(format!("{k} is unassigned")));
        }
        Ok(ModuleTable { modules, mainchain })
    }

    /// Market matching, service-payment exchange and dispute resolution.
    pub fn chainscale() -> Self {
        ModuleTable::new(
            vec![
                ModuleSpec {
                    id: ModuleId::MATCH,
                    name: "market_matching".into(),
                    types: vec![TxKind::Ask, TxKind::Offer, TxKind::Agreement],
                },
                ModuleSpec {
                    id: ModuleId::PAYMENT,
                    name: "service_payment".into(),
                    types: vec![TxKind::ServiceProof, TxKind::ServicePayment],
                },
                ModuleSpec {
                    id: ModuleId::DISPUTE,
                    name: "dispute".into(),
                    types: vec![TxKind::Dispute],
                },
            ],
            default_mainchain_types(),
        )
        .expect("built-in table is valid")
    }

    /// Every service type on one sidechain.
    pub fn single_sidechain() -> Self {
        ModuleTable::new(
            vec![ModuleSpec {
                id: ModuleId(1),
                name: "all_services".into(),
                types: TxKind::SERVICE.to_vec(),
            }],
            default_mainchain_types(),
        )
        .expect("built-in table is valid")
    }

    pub fn modules(&self) -> &[ModuleSpec] {
        &self.modules
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        self.modules.iter().map(|m| m.id).collect()
    }

    pub fn spec(&self, id: ModuleId) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.id == id)
    }

    pub fn target_of(&self, kind: TxKind) -> Result<ChainTarget> {
        if self.mainchain.contains(&kind) {
            return Ok(ChainTarget::Mainchain);
        }
        self.modules
            .iter()
            .find(|m| m.types.contains(&kind))
            .map(|m| ChainTarget::Sidechain(m.id))
            .ok_or_else(|| Error::UnassignedType(kind.name().into()))
    }

    pub fn annotate(&self, kind: TxKind) -> Result<u8> {
        Ok(match self.target_of(kind)? {
            ChainTarget::Mainchain => MAINCHAIN_PREFIX,
            ChainTarget::Sidechain(m) => SIDECHAIN_BITS | m.0,
        })
    }

    pub fn classify_prefix(&self, prefix: u8) -> Result<ChainTarget> {
        if prefix == MAINCHAIN_PREFIX {
            return Ok(ChainTarget::Mainchain);
        }
        if prefix & SIDECHAIN_BITS == SIDECHAIN_BITS {
            let id = ModuleId(prefix & !SIDECHAIN_BITS);
            if self.spec(id).is_some() {
                return Ok(ChainTarget::Sidechain(id));
            }
        }
        Err(Error::UnknownPrefix(prefix))
    }
}

fn default_mainchain_types() -> Vec<TxKind> {
    vec![TxKind::Transfer, TxKind::Sync, TxKind::EscrowCreate]
}

pub fn classify(tx: &Transaction, table: &ModuleTable) -> Result<ChainTarget> {
    table.classify_prefix(tx.prefix)
}

pub fn annotate(kind: TxKind, table: &ModuleTable) -> Result<u8> {
    table.annotate(kind)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficParams {
    pub contracts_per_node: u32,
    /// Fraction of active contracts disputed per epoch.
    pub dispute_rate: f64,
    /// Share of service-related transactions by count; the rest are transfers.
    pub service_share: f64,
    /// Negotiation length in mainchain rounds.
    pub negotiation_mean: f64,
    pub negotiation_sd: f64,
    pub negotiation_min: u32,
    pub negotiation_max: u32,
    pub duration_min: u32,
    pub duration_max: u32,
    pub price_min: u64,
    pub price_max: u64,
    pub asks_per_round: u32,
    pub offers_per_round: u32,
    pub transfer_amount_max: u64,
    pub sizes: TxSizes,
}

impl Default for TrafficParams {
    fn default() -> Self {
        TrafficParams {
            contracts_per_node: 8,
            dispute_rate: 0.1,
            service_share: 0.98,
            negotiation_mean: 3.0,
            negotiation_sd: 1.0,
            negotiation_min: 1,
            negotiation_max: 10,
            duration_min: 5,
            duration_max: 20,
            price_min: 1,
            price_max: 10,
            asks_per_round: 1,
            offers_per_round: 1,
            transfer_amount_max: 100,
            sizes: TxSizes::default(),
        }
    }
}

impl TrafficParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                Err(Error::config(field, "must lie in [0, 1]"))
            } else {
                Ok(())
            }
        };
        unit("traffic.dispute_rate", self.dispute_rate)?;
        unit("traffic.service_share", self.service_share)?;
        if self.service_share == 0.0 {
            return Err(Error::config("traffic.service_share", "must be positive"));
        }
        if self.negotiation_min == 0 || self.negotiation_min > self.negotiation_max {
            return Err(Error::config("traffic.negotiation_min", "need 1 <= min <= max"));
        }
        if !(self.negotiation_sd >= 0.0) {
            return Err(Error::config("traffic.negotiation_sd", "must be nonnegative"));
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return Err(Error::config("traffic.duration_min", "need 1 <= min <= max"));
        }
        if self.price_min == 0 || self.price_min > self.price_max {
            return Err(Error::config("traffic.price_min", "need 1 <= min <= max"));
        }
        if self.transfer_amount_max == 0 {
            return Err(Error::config("traffic.transfer_amount_max", "must be positive"));
        }
        self.sizes.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContractState {
    Active,
    Expired,
    Negotiating,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceContract {
    pub contract_id: ContractId,
    pub server: Party,
    pub client: Party,
    pub state: ContractState,
    /// Remaining active rounds in the current term.
    pub duration_rounds: u32,
    /// Active rounds served in the current term.
    pub elapsed_rounds: u32,
    pub negotiation_remaining: u32,
    pub price_per_round: u64,
}

/// Balances and escrows present before the first round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Genesis {
    pub balances: BTreeMap<Party, u64>,
    pub escrows: BTreeMap<ContractId, u64>,
    pub servers: BTreeMap<ContractId, Party>,
}

pub const GENESIS_BALANCE: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct TrafficGenerator {
    params: TrafficParams,
    table: ModuleTable,
    contracts: Vec<ServiceContract>,
    rng: ChaCha20Rng,
    parties: u32,
    epoch_len: u32,
    next_id: u64,
    service_emitted: u64,
    transfers_emitted: u64,
    disputes_due: BTreeMap<u32, BTreeSet<ContractId>>,
}

impl TrafficGenerator {
    /// `servers` storage nodes host `contracts` contracts; clients are a
    /// separate pool of `max(1, contracts / 4)` parties.
    pub fn new(
        params: TrafficParams,
        table: ModuleTable,
        servers: u32,
        contracts: u64,
        epoch_len: u32,
        scenario_seed: u64,
    ) -> Self {
        let mut rng = seed::rng(scenario_seed, "traffic", &[]);
        let servers = servers.max(1);
        let clients = (contracts / 4).max(1) as u32;
        let list = (0..contracts)
            .map(|i| {
                let total = rng.gen_range(params.duration_min..=params.duration_max);
                ServiceContract {
                    contract_id: i + 1,
                    server: (i % u64::from(servers)) as Party,
                    client: servers + (i % u64::from(clients)) as Party,
                    state: ContractState::Active,
                    duration_rounds: rng.gen_range(1..=total),
                    elapsed_rounds: 0,
                    negotiation_remaining: 0,
                    price_per_round: rng.gen_range(params.price_min..=params.price_max),
                }
            })
            .collect();
        TrafficGenerator {
            params,
            table,
            contracts: list,
            rng,
            parties: servers + clients,
            epoch_len: epoch_len.max(1),
            next_id: 1,
            service_emitted: 0,
            transfers_emitted: 0,
            disputes_due: BTreeMap::new(),
        }
    }

    /// Build directly from a contract set (used by tests and small scenarios).
    pub fn from_contracts(
        params: TrafficParams,
        table: ModuleTable,
        contracts: Vec<ServiceContract>,
        parties: u32,
        epoch_len: u32,
        scenario_seed: u64,
    ) -> Self {
        TrafficGenerator {
            params,
            table,
            contracts,
            rng: seed::rng(scenario_seed, "traffic", &[]),
            parties: parties.max(2),
            epoch_len: epoch_len.max(1),
            next_id: 1,
            service_emitted: 0,
            transfers_emitted: 0,
            disputes_due: BTreeMap::new(),
        }
    }

    pub fn genesis(&self) -> Genesis {
        let balances = (0..self.parties).map(|p| (p, GENESIS_BALANCE)).collect();
        let escrows = self
            .contracts
            .iter()
            .filter(|c| c.state == ContractState::Active)
            .map(|c| (c.contract_id, c.price_per_round * u64::from(c.duration_rounds)))
            .collect();
        let servers = self.contracts.iter().map(|c| (c.contract_id, c.server)).collect();
        Genesis {
            balances,
            escrows,
            servers,
        }
    }

    pub fn contracts(&self) -> &[ServiceContract] {
        &self.contracts
    }

    pub fn table(&self) -> &ModuleTable {
        &self.table
    }

    fn make(
        &mut self,
        kind: TxKind,
        contract_id: Option<ContractId>,
        issuer: Party,
        amount: u64,
        valid: bool,
        round: u32,
        payload: Payload,
    ) -> Transaction {
        let id = self.next_id;
        self.next_id += 1;
        if kind.is_service() {
            self.service_emitted += 1;
        }
        Transaction {
            id,
            prefix: self.table.annotate(kind).expect("generator emits only routable types"),
            kind,
            contract_id,
            issuer,
            amount,
            valid,
            size_bytes: self.params.sizes.size_of(kind),
            created_round: round,
            payload,
        }
    }

    fn schedule_disputes(&mut self, round: u32) {
        let active: Vec<ContractId> = self
            .contracts
            .iter()
            .filter(|c| c.state == ContractState::Active)
            .map(|c| c.contract_id)
            .collect();
        let n = (self.params.dispute_rate * active.len() as f64).round() as usize;
        if n == 0 {
            return;
        }
        for i in sample(&mut self.rng, active.len(), n.min(active.len())).into_vec() {
            let offset = self.rng.gen_range(0..self.epoch_len);
            self.disputes_due.entry(round + offset).or_default().insert(active[i]);
        }
    }

    fn draw_negotiation(&mut self) -> u32 {
        let p = &self.params;
        let draw = if p.negotiation_sd > 0.0 {
            Normal::new(p.negotiation_mean, p.negotiation_sd)
                .expect("sd validated")
                .sample(&mut self.rng)
        } else {
            p.negotiation_mean
        };
        (draw.round().max(0.0) as u32).clamp(p.negotiation_min, p.negotiation_max)
    }

    /// All transactions created at the start of mainchain round `round`;
    /// contract states advance as a side effect.
    pub fn gen_round_traffic(&mut self, round: u32) -> Vec<Transaction> {
        if round % self.epoch_len == 0 {
            self.schedule_disputes(round);
        }
        let due = self.disputes_due.remove(&round).unwrap_or_default();
        let mut out = Vec::new();
        for idx in 0..self.contracts.len() {
            let c = self.contracts[idx].clone();
            let cid = Some(c.contract_id);
            match c.state {
                ContractState::Active if due.contains(&c.contract_id) => {
                    let proof = self.make(TxKind::ServiceProof, cid, c.server, 0, false, round, Payload::None);
                    let proof_id = proof.id;
                    out.push(proof);
                    out.push(self.make(
                        TxKind::Dispute,
                        cid,
                        c.client,
                        0,
                        true,
                        round,
                        Payload::Dispute {
                            proof_id,
                            outcome: Outcome::Penalize,
                        },
                    ));
                    self.contracts[idx].state = ContractState::Terminated;
                }
                ContractState::Active => {
                    out.push(self.make(TxKind::ServiceProof, cid, c.server, 0, true, round, Payload::None));
                    let elapsed = c.elapsed_rounds + 1;
                    if c.duration_rounds <= 1 {
                        out.push(self.make(
                            TxKind::ServicePayment,
                            cid,
                            c.server,
                            c.price_per_round * u64::from(elapsed),
                            true,
                            round,
                            Payload::None,
                        ));
                        let neg = self.draw_negotiation();
                        let k = &mut self.contracts[idx];
                        k.state = ContractState::Expired;
                        k.duration_rounds = 0;
                        k.elapsed_rounds = 0;
                        k.state = ContractState::Negotiating;
                        k.negotiation_remaining = neg;
                    } else {
                        let k = &mut self.contracts[idx];
                        k.duration_rounds -= 1;
                        k.elapsed_rounds = elapsed;
                    }
                }
                ContractState::Negotiating => {
                    for _ in 0..self.params.asks_per_round {
                        out.push(self.make(TxKind::Ask, cid, c.client, 0, true, round, Payload::None));
                    }
                    for _ in 0..self.params.offers_per_round {
                        out.push(self.make(TxKind::Offer, cid, c.server, 0, true, round, Payload::None));
                    }
                    if c.negotiation_remaining <= 1 {
                        let duration = self.rng.gen_range(self.params.duration_min..=self.params.duration_max);
                        let price = self.rng.gen_range(self.params.price_min..=self.params.price_max);
                        let terms = Terms {
                            server: c.server,
                            client: c.client,
                            price_per_round: price,
                            duration_rounds: duration,
                        };
                        out.push(self.make(TxKind::Agreement, cid, c.server, 0, true, round, Payload::Deal(terms)));
                        out.push(self.make(
                            TxKind::EscrowCreate,
                            cid,
                            c.client,
                            price * u64::from(duration),
                            true,
                            round,
                            Payload::None,
                        ));
                        let k = &mut self.contracts[idx];
                        k.state = ContractState::Active;
                        k.duration_rounds = duration;
                        k.elapsed_rounds = 0;
                        k.negotiation_remaining = 0;
                        k.price_per_round = price;
                    } else {
                        self.contracts[idx].negotiation_remaining -= 1;
                    }
                }
                ContractState::Expired | ContractState::Terminated => {}
            }
        }
        let target = transfer_target(self.service_emitted, self.params.service_share);
        while self.transfers_emitted < target {
            let from = self.rng.gen_range(0..self.parties);
            let mut to = self.rng.gen_range(0..self.parties - 1);
            if to >= from {
                to += 1;
            }
            let amount = self.rng.gen_range(1..=self.params.transfer_amount_max);
            out.push(self.make(TxKind::Transfer, None, from, amount, true, round, Payload::Transfer { to }));
            self.transfers_emitted += 1;
        }
        out
    }
}

/// Cumulative transfer count keeping service:transfer at `share : 1 - share`.
pub fn transfer_target(service: u64, share: f64) -> u64 {
    let exact = service as f64 * (1.0 - share) / share;
    (exact - 1e-9).ceil().max(0.0) as u64
}

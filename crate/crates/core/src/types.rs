//! Shared data model: transactions, blocks, summaries, miners, committees.
//!
//! Transactions have a canonical fixed-width byte layout so that storage
//! figures are exact byte counts. Layout (little endian):
//!
//! | offset | width | field                                         |
//! |--------|-------|-----------------------------------------------|
//! | 0      | 1     | routing prefix                                |
//! | 1      | 1     | type tag (`TxKind as u8`)                     |
//! | 2      | 1     | flags: bit0 `valid`, bit1 has contract        |
//! | 3      | 8     | id                                            |
//! | 11     | 8     | contract id (0 when absent)                   |
//! | 19     | 4     | issuer                                        |
//! | 23     | 8     | amount                                        |
//! | 31     | 4     | created round                                 |
//! | 35     | var   | type-specific body, then zero padding to size |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::ModuleTable;

pub type TxId = u64;
pub type ContractId = u64;
pub type Party = u32;
pub type MinerId = u32;

pub const DISPUTE_TX_BYTES: u32 = 515;
pub const AGREEMENT_TX_BYTES: u32 = 716;
pub const TX_HEADER_BYTES: usize = 35;
/// Largest body any transaction type carries; configured sizes must fit it.
pub const MIN_TX_BYTES: u32 = 64;
pub const META_HEADER_BYTES: u64 = 128;
pub const MAIN_HEADER_BYTES: u64 = 128;

/// Six-bit module indicator carried in the routing prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId(pub u8);

impl ModuleId {
    pub const MATCH: ModuleId = ModuleId(1);
    pub const PAYMENT: ModuleId = ModuleId(2);
    pub const DISPUTE: ModuleId = ModuleId(3);
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// A module sidechain or one of its sub-sidechains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SidechainId {
    pub module: ModuleId,
    pub sub: u8,
}

impl SidechainId {
    pub fn primary(module: ModuleId) -> Self {
        SidechainId { module, sub: 0 }
    }
}

impl fmt::Display for SidechainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sub == 0 {
            write!(f, "sc{}", self.module.0)
        } else {
            write!(f, "sc{}.{}", self.module.0, self.sub)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Ask = 1,
    Offer = 2,
    /// Contract-deal: the client's proposal countersigned by the server.
    Agreement = 3,
    /// Proof of retrievability.
    ServiceProof = 4,
    ServicePayment = 5,
    Dispute = 6,
    Transfer = 7,
    Sync = 8,
    EscrowCreate = 9,
}

impl TxKind {
    pub const ALL: [TxKind; 9] = [
        TxKind::Ask,
        TxKind::Offer,
        TxKind::Agreement,
        TxKind::ServiceProof,
        TxKind::ServicePayment,
        TxKind::Dispute,
        TxKind::Transfer,
        TxKind::Sync,
        TxKind::EscrowCreate,
    ];

    pub const SERVICE: [TxKind; 6] = [
        TxKind::Ask,
        TxKind::Offer,
        TxKind::Agreement,
        TxKind::ServiceProof,
        TxKind::ServicePayment,
        TxKind::Dispute,
    ];

    pub fn from_tag(tag: u8) -> Option<TxKind> {
        TxKind::ALL.get(usize::from(tag).wrapping_sub(1)).copied()
    }

    /// Service-related types can be summarized and therefore live on sidechains.
    pub fn is_service(self) -> bool {
        TxKind::SERVICE.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            TxKind::Ask => "ask",
            TxKind::Offer => "offer",
            TxKind::Agreement => "agreement",
            TxKind::ServiceProof => "service_proof",
            TxKind::ServicePayment => "service_payment",
            TxKind::Dispute => "dispute",
            TxKind::Transfer => "transfer",
            TxKind::Sync => "sync",
            TxKind::EscrowCreate => "escrow_create",
        }
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Terms {
    pub server: Party,
    pub client: Party,
    pub price_per_round: u64,
    pub duration_rounds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Penalize = 1,
    Dismiss = 2,
}

/// Mainchain-side handle of a sync-transaction's contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyncRef {
    pub module: ModuleId,
    pub first_epoch: u32,
    pub last_epoch: u32,
    pub entries: u32,
    pub digest: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    None,
    Deal(Terms),
    Dispute { proof_id: TxId, outcome: Outcome },
    Transfer { to: Party },
    Sync(SyncRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub prefix: u8,
    pub kind: TxKind,
    pub contract_id: Option<ContractId>,
    pub issuer: Party,
    pub amount: u64,
    pub valid: bool,
    pub size_bytes: u32,
    pub created_round: u32,
    pub payload: Payload,
}

/// Byte sizes for transaction types whose size is configurable. Disputes and
/// contract-deals have fixed sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TxSizes {
    pub por: u32,
    pub ask: u32,
    pub offer: u32,
    pub payment: u32,
    pub transfer: u32,
    pub escrow: u32,
    pub sync_base: u32,
    pub sync_per_entry: u32,
}

impl Default for TxSizes {
    fn default() -> Self {
        TxSizes {
            por: 200,
            ask: 150,
            offer: 150,
            payment: 120,
            transfer: 100,
            escrow: 150,
            sync_base: 1024,
            sync_per_entry: 32,
        }
    }
}

impl TxSizes {
    pub fn size_of(&self, kind: TxKind) -> u32 {
        match kind {
            TxKind::Ask => self.ask,
            TxKind::Offer => self.offer,
            TxKind::Agreement => AGREEMENT_TX_BYTES,
            TxKind::ServiceProof => self.por,
            TxKind::ServicePayment => self.payment,
            TxKind::Dispute => DISPUTE_TX_BYTES,
            TxKind::Transfer => self.transfer,
            TxKind::Sync => self.sync_base,
            TxKind::EscrowCreate => self.escrow,
        }
    }

    pub fn sync_size(&self, entries: usize) -> u32 {
        self.sync_base + self.sync_per_entry * entries as u32
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("traffic.sizes.por", self.por),
            ("traffic.sizes.ask", self.ask),
            ("traffic.sizes.offer", self.offer),
            ("traffic.sizes.payment", self.payment),
            ("traffic.sizes.transfer", self.transfer),
            ("traffic.sizes.escrow", self.escrow),
            ("traffic.sizes.sync_base", self.sync_base),
        ];
        for (field, v) in named {
            if v < MIN_TX_BYTES {
                return Err(Error::config(field, format!("must be at least {MIN_TX_BYTES} bytes")));
            }
        }
        Ok(())
    }
}

impl Transaction {
    /// Canonical encoding under the default three-module routing table.
    pub fn encode(&self) -> Vec<u8> {
        encode_transaction(self)
    }
}

pub fn encode_transaction(tx: &Transaction) -> Vec<u8> {
    let mut out = Vec::with_capacity(tx.size_bytes as usize);
    out.push(tx.prefix);
    out.push(tx.kind as u8);
    let mut flags = 0u8;
    if tx.valid {
        flags |= 1;
    }
    if tx.contract_id.is_some() {
        flags |= 2;
    }
    out.push(flags);
    out.extend_from_slice(&tx.id.to_le_bytes());
    out.extend_from_slice(&tx.contract_id.unwrap_or(0).to_le_bytes());
    out.extend_from_slice(&tx.issuer.to_le_bytes());
    out.extend_from_slice(&tx.amount.to_le_bytes());
    out.extend_from_slice(&tx.created_round.to_le_bytes());
    match tx.payload {
        Payload::None => {}
        Payload::Deal(t) => {
            out.extend_from_slice(&t.server.to_le_bytes());
            out.extend_from_slice(&t.client.to_le_bytes());
            out.extend_from_slice(&t.price_per_round.to_le_bytes());
            out.extend_from_slice(&t.duration_rounds.to_le_bytes());
        }
        Payload::Dispute { proof_id, outcome } => {
            out.extend_from_slice(&proof_id.to_le_bytes());
            out.push(outcome as u8);
        }
        Payload::Transfer { to } => out.extend_from_slice(&to.to_le_bytes()),
        Payload::Sync(s) => {
            out.push(s.module.0);
            out.extend_from_slice(&s.first_epoch.to_le_bytes());
            out.extend_from_slice(&s.last_epoch.to_le_bytes());
            out.extend_from_slice(&s.entries.to_le_bytes());
            out.extend_from_slice(&s.digest.to_le_bytes());
        }
    }
    debug_assert!(out.len() <= tx.size_bytes as usize);
    out.resize(tx.size_bytes as usize, 0);
    out
}

/// Inverse of [`encode_transaction`] under the default routing table.
pub fn decode_transaction(bytes: &[u8]) -> Result<Transaction> {
    decode_transaction_with(bytes, &ModuleTable::chainscale())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::MalformedEncoding(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn decode_transaction_with(bytes: &[u8], table: &ModuleTable) -> Result<Transaction> {
    let malformed = |m: &str| Error::MalformedEncoding(m.to_string());
    if bytes.len() < TX_HEADER_BYTES {
        return Err(malformed("shorter than header"));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    let prefix = r.u8()?;
    let tag = r.u8()?;
    let kind = TxKind::from_tag(tag).ok_or_else(|| malformed("unknown type tag"))?;
    let flags = r.u8()?;
    if flags & !0b11 != 0 {
        return Err(malformed("reserved flag bits set"));
    }
    let id = r.u64()?;
    let cid = r.u64()?;
    let contract_id = if flags & 2 != 0 {
        Some(cid)
    } else if cid != 0 {
        return Err(malformed("contract id without contract flag"));
    } else {
        None
    };
    let issuer = r.u32()?;
    let amount = r.u64()?;
    let created_round = r.u32()?;
    let payload = match kind {
        TxKind::Agreement => Payload::Deal(Terms {
            server: r.u32()?,
            client: r.u32()?,
            price_per_round: r.u64()?,
            duration_rounds: r.u32()?,
        }),
        TxKind::Dispute => {
            let proof_id = r.u64()?;
            let outcome = match r.u8()? {
                1 => Outcome::Penalize,
                2 => Outcome::Dismiss,
                _ => return Err(malformed("unknown dispute outcome")),
            };
            Payload::Dispute { proof_id, outcome }
        }
        TxKind::Transfer => Payload::Transfer { to: r.u32()? },
        TxKind::Sync => Payload::Sync(SyncRef {
            module: ModuleId(r.u8()?),
            first_epoch: r.u32()?,
            last_epoch: r.u32()?,
            entries: r.u32()?,
            digest: r.u64()?,
        }),
        _ => Payload::None,
    };
    if bytes[r.pos..].iter().any(|&b| b != 0) {
        return Err(malformed("nonzero padding"));
    }
    let expected = table
        .annotate(kind)
        .map_err(|_| malformed("type not routable under table"))?;
    if prefix != expected {
        return Err(Error::MalformedEncoding(format!(
            "prefix {prefix:#04x} inconsistent with {kind} (expected {expected:#04x})"
        )));
    }
    Ok(Transaction {
        id,
        prefix,
        kind,
        contract_id,
        issuer,
        amount,
        valid: flags & 1 != 0,
        size_bytes: bytes.len() as u32,
        created_round,
        payload,
    })
}

/// Temporary sidechain block. `round` is the global sidechain-round index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaBlock {
    pub sidechain: SidechainId,
    pub epoch: u32,
    pub round: u32,
    pub txs: Vec<Transaction>,
    pub capacity_bytes: u64,
    /// Marker block mined while a dependency is stalled.
    pub empty: bool,
}

impl MetaBlock {
    pub fn payload_bytes(&self) -> u64 {
        self.txs.iter().map(|t| u64::from(t.size_bytes)).sum()
    }

    pub fn bytes(&self) -> u64 {
        META_HEADER_BYTES + self.payload_bytes()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub por_count: u64,
    pub payment_total: u64,
    pub dispute_outcome: Option<(TxId, Outcome)>,
    pub match_record: Option<Terms>,
}

/// Permanent per-epoch aggregate of a module's meta-blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryBlock {
    pub module: ModuleId,
    pub epoch: u32,
    pub entries: BTreeMap<ContractId, SummaryEntry>,
    /// First and last sidechain round of the covered meta-blocks.
    pub covered_rounds: Option<(u32, u32)>,
}

impl SummaryBlock {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * 40);
        out.push(self.module.0);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let (a, b) = self.covered_rounds.unwrap_or((u32::MAX, u32::MAX));
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (cid, e) in &self.entries {
            out.extend_from_slice(&cid.to_le_bytes());
            let mut mask = 0u8;
            if e.por_count > 0 || e.payment_total > 0 {
                mask |= 1;
            }
            if e.dispute_outcome.is_some() {
                mask |= 2;
            }
            if e.match_record.is_some() {
                mask |= 4;
            }
            out.push(mask);
            if mask & 1 != 0 {
                out.extend_from_slice(&e.por_count.to_le_bytes());
                out.extend_from_slice(&e.payment_total.to_le_bytes());
            }
            if let Some((proof, outcome)) = e.dispute_outcome {
                out.extend_from_slice(&proof.to_le_bytes());
                out.push(outcome as u8);
            }
            if let Some(t) = e.match_record {
                out.extend_from_slice(&t.server.to_le_bytes());
                out.extend_from_slice(&t.client.to_le_bytes());
                out.extend_from_slice(&t.price_per_round.to_le_bytes());
                out.extend_from_slice(&t.duration_rounds.to_le_bytes());
            }
        }
        out
    }

    pub fn bytes(&self) -> u64 {
        self.encode().len() as u64
    }

    /// 64-bit FNV-1a digest of the canonical encoding.
    pub fn digest(&self) -> u64 {
        fnv1a(&self.encode())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mainchain-bound carrier of one or more epoch summaries of a module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncTransaction {
    pub module: ModuleId,
    /// Summaries in epoch order; more than one after mass-syncing.
    pub summaries: Vec<SummaryBlock>,
    pub issuer: MinerId,
    pub requested_subchains: u32,
}

impl SyncTransaction {
    pub fn entry_count(&self) -> usize {
        self.summaries.iter().map(|s| s.entries.len()).sum()
    }

    pub fn epochs(&self) -> impl Iterator<Item = u32> + '_ {
        self.summaries.iter().map(|s| s.epoch)
    }

    pub fn sync_ref(&self) -> SyncRef {
        let mut bytes = Vec::new();
        for s in &self.summaries {
            bytes.extend_from_slice(&s.encode());
        }
        SyncRef {
            module: self.module,
            first_epoch: self.summaries.first().map_or(0, |s| s.epoch),
            last_epoch: self.summaries.last().map_or(0, |s| s.epoch),
            entries: self.entry_count() as u32,
            digest: fnv1a(&bytes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Never votes.
    Lazy,
    Malicious,
}

impl Behavior {
    pub fn misbehaving(self) -> bool {
        self != Behavior::Honest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerRecord {
    pub id: MinerId,
    pub pk: [u8; 32],
    pub mining_power: f64,
    pub participation: u64,
    pub disputes: u64,
    pub score: f64,
    pub class: usize,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitteeRole {
    Primary,
    Backup(u32),
    SyncCommittee,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committee {
    pub sidechain: SidechainId,
    pub members: Vec<MinerId>,
    pub leader: usize,
    pub role: CommitteeRole,
}

impl Committee {
    pub fn new(sidechain: SidechainId, members: Vec<MinerId>, role: CommitteeRole) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidCounts("empty committee".into()));
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidCounts("committee members must be distinct".into()));
        }
        Ok(Committee {
            sidechain,
            members,
            leader: 0,
            role,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn leader_id(&self) -> MinerId {
        self.members[self.leader]
    }

    /// Largest f with 3f + 2 <= size.
    pub fn max_faulty(&self) -> usize {
        max_faulty(self.size())
    }

    /// Votes required for a block: 2f + 2.
    pub fn votes_needed(&self) -> usize {
        2 * self.max_faulty() + 2
    }
}

pub fn max_faulty(size: usize) -> usize {
    size.saturating_sub(2) / 3
}

/// Absent votes at which a committee of this size can no longer make progress.
pub fn default_liveness_threshold(size: usize) -> usize {
    (size + 1).saturating_sub(2 * max_faulty(size) + 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainBlock {
    pub round: u32,
    pub txs: Vec<Transaction>,
    pub syncs: Vec<SyncTransaction>,
    pub capacity_bytes: u64,
}

impl MainBlock {
    pub fn payload_bytes(&self) -> u64 {
        self.txs.iter().map(|t| u64::from(t.size_bytes)).sum()
    }

    pub fn bytes(&self) -> u64 {
        MAIN_HEADER_BYTES + self.payload_bytes()
    }
}

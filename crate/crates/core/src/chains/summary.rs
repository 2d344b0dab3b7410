//! Summary rules and sync-transaction construction/verification.

use std::collections::BTreeMap;

use crate::types::{
    MetaBlock, ModuleId, Payload, SummaryBlock, SummaryEntry, SyncTransaction, TxKind, MinerId,
};

/// Fold an epoch's meta-blocks (from every sub-sidechain of `module`)
/// into one summary. Rules are keyed by transaction type so the same code
/// serves a single all-services sidechain.
pub fn produce_summary_block<'a>(
    module: ModuleId,
    epoch: u32,
    metas: impl IntoIterator<Item = &'a MetaBlock>,
) -> SummaryBlock {
    let mut entries: BTreeMap<u64, SummaryEntry> = BTreeMap::new();
    let mut covered: Option<(u32, u32)> = None;
    for meta in metas {
        debug_assert_eq!(meta.epoch, epoch);
        covered = Some(match covered {
            None => (meta.round, meta.round),
            Some((a, b)) => (a.min(meta.round), b.max(meta.round)),
        });
        for tx in &meta.txs {
            let Some(cid) = tx.contract_id else { continue };
            match (tx.kind, tx.payload) {
                (TxKind::ServiceProof, _) => entries.entry(cid).or_default().por_count += 1,
                (TxKind::ServicePayment, _) => entries.entry(cid).or_default().payment_total += tx.amount,
                (TxKind::Dispute, Payload::Dispute { proof_id, outcome }) => {
                    entries.entry(cid).or_default().dispute_outcome = Some((proof_id, outcome));
                }
                (TxKind::Agreement, Payload::Deal(terms)) => {
                    entries.entry(cid).or_default().match_record = Some(terms);
                }
                _ => {}
            }
        }
    }
    SummaryBlock {
        module,
        epoch,
        entries,
        covered_rounds: covered,
    }
}

pub fn create_sync_tx(summaries: Vec<SummaryBlock>, issuer: MinerId, requested_subchains: u32) -> SyncTransaction {
    debug_assert!(summaries.windows(2).all(|w| w[0].epoch < w[1].epoch));
    SyncTransaction {
        module: summaries.first().map_or(ModuleId(0), |s| s.module),
        summaries,
        issuer,
        requested_subchains,
    }
}

/// Recompute each carried summary from the still-present meta-blocks and
/// compare encodings byte for byte.
pub fn verify_sync_tx<'a, F, I>(sync: &SyncTransaction, metas_of_epoch: F) -> bool
where
    F: Fn(u32) -> I,
    I: IntoIterator<Item = &'a MetaBlock>,
{
    sync.summaries.iter().all(|s| {
        s.module == sync.module
            && produce_summary_block(sync.module, s.epoch, metas_of_epoch(s.epoch)).encode() == s.encode()
    })
}

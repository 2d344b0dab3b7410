//! Heavy-module detection, sub-sidechain allocation over class pools, and
//! sync-committee election.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{Committee, CommitteeRole, MinerId, ModuleId, SidechainId};

/// Sub-sidechains a module asks for after an epoch.
pub fn detect_heavy(all_full: bool, backlog_bytes: u64, epoch_capacity_bytes: u64, cap: u32) -> u32 {
    if !all_full || epoch_capacity_bytes == 0 || backlog_bytes <= epoch_capacity_bytes {
        return 1;
    }
    let want = backlog_bytes.div_ceil(epoch_capacity_bytes);
    want.min(u64::from(cap.max(1))) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubchainRequest {
    pub module: ModuleId,
    pub requested: u32,
    /// Per-class miners one sub-sidechain needs.
    pub quota: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubchainGrant {
    pub module: ModuleId,
    /// Per-class composition of each granted sub-sidechain.
    pub compositions: Vec<Vec<u64>>,
}

impl SubchainGrant {
    pub fn subchains(&self) -> u32 {
        self.compositions.len() as u32
    }

    pub fn totals(&self) -> Vec<u64> {
        let classes = self.compositions.first().map_or(0, Vec::len);
        (0..classes).map(|c| self.compositions.iter().map(|q| q[c]).sum()).collect()
    }
}

fn fits(quota: &[u64], pool: &[u64]) -> bool {
    quota.iter().zip(pool).all(|(q, p)| q <= p)
}

fn take(quota: &[u64], pool: &mut [u64]) {
    for (p, q) in pool.iter_mut().zip(quota) {
        *p -= q;
    }
}

/// Largest ratio-preserving scale-down of `quota` that fits `pool`.
fn scaled(quota: &[u64], pool: &[u64], min_committee: u64) -> Option<Vec<u64>> {
    // lambda = min over used classes of pool/quota, kept as a fraction
    let (num, den) = quota
        .iter()
        .zip(pool)
        .filter(|(q, _)| **q > 0)
        .map(|(&q, &p)| (p, q))
        .min_by(|a, b| (u128::from(a.0) * u128::from(b.1)).cmp(&(u128::from(b.0) * u128::from(a.1))))?;
    let comp: Vec<u64> = quota.iter().map(|&q| q * num / den).collect();
    (comp.iter().sum::<u64>() >= min_committee.max(1)).then_some(comp)
}

/// Grant sub-sidechains to heavy modules (given in priority order) out of
/// the per-class pools left after non-heavy modules were reserved.
///
/// Every module first gets one sidechain, then extra sub-sidechains are
/// handed out round-robin while full quotas fit.
pub fn allocate_subchains(requests: &[SubchainRequest], available: &[u64], min_committee: u64) -> Result<Vec<SubchainGrant>> {
    let mut pool = available.to_vec();
    let mut grants: Vec<SubchainGrant> = Vec::with_capacity(requests.len());
    for r in requests {
        if r.quota.len() != pool.len() {
            return Err(Error::InvalidCounts("quota must cover every class".into()));
        }
        let comp = if fits(&r.quota, &pool) {
            r.quota.clone()
        } else {
            scaled(&r.quota, &pool, min_committee).ok_or(Error::NoCapacity)?
        };
        take(&comp, &mut pool);
        grants.push(SubchainGrant {
            module: r.module,
            compositions: vec![comp],
        });
    }
    loop {
        let mut progressed = false;
        for (r, g) in requests.iter().zip(grants.iter_mut()) {
            if g.subchains() < r.requested.max(1) && fits(&r.quota, &pool) {
                take(&r.quota, &mut pool);
                g.compositions.push(r.quota.clone());
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(grants)
}

/// Sub-sidechain of a contract for one epoch.
pub fn route_to_subchain(cid: u64, epoch: u32, seed: u64, subchains: u32) -> u32 {
    if subchains <= 1 {
        return 0;
    }
    (seed::hash_u64(seed, "subchain-route", &[cid, u64::from(epoch)]) % u64::from(subchains)) as u32
}

/// Sample the sync committee from the union of sub-committee members with
/// the same per-class proportions as the sub-committees combined.
pub fn elect_sync_committee<R: Rng>(
    sub_committees: &[Committee],
    class_of: impl Fn(MinerId) -> usize,
    size: usize,
    rng: &mut R,
) -> Result<Committee> {
    let first = sub_committees.first().ok_or(Error::InvalidCounts("no sub-committees".into()))?;
    let module = first.sidechain.module;
    if sub_committees.len() == 1 {
        let mut c = first.clone();
        c.role = CommitteeRole::SyncCommittee;
        c.leader = 0;
        return Ok(c);
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<MinerId>> = Default::default();
    for m in sub_committees.iter().flat_map(|c| c.members.iter().copied()) {
        by_class.entry(class_of(m)).or_default().push(m);
    }
    let total: usize = by_class.values().map(Vec::len).sum();
    let size = size.min(total);
    // largest remainder apportionment, ties to the lower class index
    let mut seats: Vec<(usize, usize, usize)> = by_class
        .iter()
        .map(|(&c, v)| (c, v.len() * size / total, v.len() * size % total))
        .collect();
    let mut left = size - seats.iter().map(|s| s.1).sum::<usize>();
    let mut order: Vec<usize> = (0..seats.len()).collect();
    order.sort_by(|&a, &b| seats[b].2.cmp(&seats[a].2).then(seats[a].0.cmp(&seats[b].0)));
    for i in order {
        if left == 0 {
            break;
        }
        seats[i].1 += 1;
        left -= 1;
    }
    let mut members = Vec::with_capacity(size);
    for (c, n, _) in seats {
        let pool = &by_class[&c];
        members.extend(pool.choose_multiple(rng, n).copied());
    }
    members.shuffle(rng);
    Committee::new(SidechainId::primary(module), members, CommitteeRole::SyncCommittee)
}

//! Random and weighted VRF sortition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::score::assign_class;
use super::vrf::{vrf_verify, VrfKeypair, VrfOutput};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::types::{MinerId, MinerRecord, SidechainId};

/// A committee seat group: a sidechain plus its rank (0 primary, r backup r).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotId {
    pub sidechain: SidechainId,
    pub rank: u32,
}

/// `counts[c - 1][s]` miners of class `c` for slot `slots[s]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQuota {
    pub slots: Vec<SlotId>,
    pub counts: Vec<Vec<u64>>,
}

impl ClassQuota {
    pub fn new(slots: Vec<SlotId>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.iter().any(|row| row.len() != slots.len()) {
            return Err(Error::InvalidCounts("quota rows must cover every slot".into()));
        }
        Ok(ClassQuota { slots, counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n_c_all(&self, class: usize) -> u64 {
        self.counts[class - 1].iter().sum()
    }

    pub fn slot_size(&self, slot: usize) -> u64 {
        self.counts.iter().map(|row| row[slot]).sum()
    }

    /// Slot whose cumulative sub-range of [0, 1) contains `value / 2^64`.
    pub fn slot_for(&self, class: usize, value: u64) -> Option<usize> {
        let row = &self.counts[class - 1];
        let total = u128::from(self.n_c_all(class));
        let mut cum = 0u128;
        for (s, &n) in row.iter().enumerate() {
            cum += u128::from(n);
            if u128::from(value) * total < cum << 64 {
                return Some(s);
            }
        }
        None
    }
}

/// Size of class `c` when `n` ranked miners are split into `classes` classes.
pub fn class_size(n: usize, classes: usize, c: usize) -> u64 {
    ((c * n) / classes - ((c - 1) * n) / classes) as u64
}

/// Elected iff rnd / 2^64 < C(mu-1, n-1) / C(mu, n) = n / mu.
pub fn passes_threshold(value: u64, n_c_all: u64, mu: u64) -> bool {
    u128::from(value) * u128::from(mu) < u128::from(n_c_all) << 64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectionResult {
    pub pk: [u8; 32],
    pub score: f64,
    pub class: usize,
    pub rnd1: VrfOutput,
    pub rnd2: Option<VrfOutput>,
    pub assignment: Option<SlotId>,
}

pub fn vrf_input(seed: &[u8; 32], pk: &[u8; 32]) -> [u8; 64] {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(seed);
    buf[32..].copy_from_slice(pk);
    buf
}

fn elect_in_class(
    seed1: &[u8; 32],
    seed2: &[u8; 32],
    kp: &VrfKeypair,
    score: f64,
    class: usize,
    mu: u64,
    quotas: &ClassQuota,
) -> Result<ElectionResult> {
    let pk = kp.public();
    let needed = if class <= quotas.classes() { quotas.n_c_all(class) } else { 0 };
    if needed > mu {
        return Err(Error::QuotaInfeasible {
            class,
            needed,
            available: mu,
        });
    }
    let rnd1 = kp.eval(&vrf_input(seed1, &pk));
    let mut result = ElectionResult {
        pk,
        score,
        class,
        rnd1,
        rnd2: None,
        assignment: None,
    };
    if needed > 0 && passes_threshold(rnd1.value, needed, mu) {
        let rnd2 = kp.eval(&vrf_input(seed2, &pk));
        result.assignment = quotas.slot_for(class, rnd2.value).map(|s| quotas.slots[s]);
        result.rnd2 = Some(rnd2);
    }
    Ok(result)
}

/// Weighted sortition for one miner. `population` holds every (score, pk).
pub fn elect(
    seed1: &[u8; 32],
    seed2: &[u8; 32],
    kp: &VrfKeypair,
    score: f64,
    population: &[(f64, [u8; 32])],
    quotas: &ClassQuota,
) -> Result<ElectionResult> {
    let classes = quotas.classes();
    let class = assign_class(score, &kp.public(), population, classes)?;
    let mu = class_size(population.len(), classes, class);
    elect_in_class(seed1, seed2, kp, score, class, mu, quotas)
}

pub fn verify_election(
    result: &ElectionResult,
    seed1: &[u8; 32],
    seed2: &[u8; 32],
    population: &[(f64, [u8; 32])],
    quotas: &ClassQuota,
) -> bool {
    if !population.iter().any(|(s, pk)| *s == result.score && *pk == result.pk) {
        return false;
    }
    let classes = quotas.classes();
    let Ok(class) = assign_class(result.score, &result.pk, population, classes) else {
        return false;
    };
    verify_in_class(result, seed1, seed2, class, class_size(population.len(), classes, class), quotas)
}

fn verify_in_class(
    result: &ElectionResult,
    seed1: &[u8; 32],
    seed2: &[u8; 32],
    class: usize,
    mu: u64,
    quotas: &ClassQuota,
) -> bool {
    if class != result.class || !vrf_verify(&result.pk, &vrf_input(seed1, &result.pk), &result.rnd1) {
        return false;
    }
    let needed = quotas.n_c_all(class);
    let elected = needed > 0 && needed <= mu && passes_threshold(result.rnd1.value, needed, mu);
    match (elected, result.rnd2, result.assignment) {
        (false, None, None) => true,
        (true, Some(rnd2), Some(slot)) => {
            vrf_verify(&result.pk, &vrf_input(seed2, &result.pk), &rnd2)
                && quotas.slot_for(class, rnd2.value).map(|s| quotas.slots[s]) == Some(slot)
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectionMode {
    Random,
    #[default]
    Weighted,
}

/// Seated committees keyed by slot; members in leader-rotation order.
pub type Seating = BTreeMap<SlotId, Vec<MinerId>>;

/// Random sortition: rank eligible miners by VRF(seed1 || pk) and hand out
/// consecutive runs of `sizes[s]` miners to each slot in order.
pub fn sortition_random(
    seed1: &[u8; 32],
    miners: &[MinerRecord],
    keys: &[VrfKeypair],
    eligible: &[MinerId],
    slots: &[(SlotId, u64)],
    exec: Exec,
) -> Result<Seating> {
    let needed: u64 = slots.iter().map(|s| s.1).sum();
    if needed > eligible.len() as u64 {
        return Err(Error::NoCapacity);
    }
    let mut draws: Vec<(u64, [u8; 32], MinerId)> = exec.map(eligible.to_vec(), |id| {
        let m = &miners[id as usize];
        let out = keys[id as usize].eval(&vrf_input(seed1, &m.pk));
        debug_assert!(vrf_verify(&m.pk, &vrf_input(seed1, &m.pk), &out));
        (out.value, m.pk, id)
    });
    draws.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut it = draws.into_iter().map(|d| d.2);
    Ok(slots
        .iter()
        .map(|&(slot, size)| (slot, it.by_ref().take(size as usize).collect()))
        .collect())
}

/// Weighted sortition over `eligible`, each miner running the per-miner
/// election locally. Results are verified, then every (class, slot) group
/// is trimmed or backfilled to its exact quota in pk order.
pub fn sortition_weighted(
    seed1: &[u8; 32],
    seed2: &[u8; 32],
    miners: &[MinerRecord],
    keys: &[VrfKeypair],
    eligible: &[MinerId],
    quotas: &ClassQuota,
    exec: Exec,
) -> Result<Seating> {
    let classes = quotas.classes();
    let mut mu = vec![0u64; classes + 1];
    for &id in eligible {
        mu[miners[id as usize].class] += 1;
    }
    for c in 1..=classes {
        if quotas.n_c_all(c) > mu[c] {
            return Err(Error::QuotaInfeasible {
                class: c,
                needed: quotas.n_c_all(c),
                available: mu[c],
            });
        }
    }
    let results: Vec<(MinerId, ElectionResult)> = exec
        .map(eligible.to_vec(), |id| {
            let m = &miners[id as usize];
            let r = elect_in_class(seed1, seed2, &keys[id as usize], m.score, m.class, mu[m.class], quotas)?;
            if !verify_in_class(&r, seed1, seed2, m.class, mu[m.class], quotas) {
                return Err(Error::Invariant(format!("election of miner {id} failed verification")));
            }
            Ok((id, r))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    // (class, slot) -> [(rnd2, pk, id)]
    let mut groups: BTreeMap<(usize, usize), Vec<(u64, [u8; 32], MinerId)>> = BTreeMap::new();
    let mut leftovers: Vec<Vec<([u8; 32], MinerId)>> = vec![Vec::new(); classes + 1];
    let slot_index: BTreeMap<SlotId, usize> = quotas.slots.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    for (id, r) in results {
        match r.assignment {
            Some(slot) => groups
                .entry((r.class, slot_index[&slot]))
                .or_default()
                .push((r.rnd2.map_or(0, |o| o.value), r.pk, id)),
            None => leftovers[r.class].push((r.pk, id)),
        }
    }
    let mut kept: BTreeMap<(usize, usize), Vec<(u64, [u8; 32], MinerId)>> = BTreeMap::new();
    for c in 1..=classes {
        for s in 0..quotas.slots.len() {
            let mut g = groups.remove(&(c, s)).unwrap_or_default();
            g.sort_unstable_by(|a, b| a.1.cmp(&b.1));
            let want = quotas.counts[c - 1][s] as usize;
            if g.len() > want {
                leftovers[c].extend(g.drain(want..).map(|(_, pk, id)| (pk, id)));
            }
            kept.insert((c, s), g);
        }
        leftovers[c].sort_unstable();
    }
    let mut pools: Vec<std::vec::IntoIter<([u8; 32], MinerId)>> =
        leftovers.into_iter().map(|v| v.into_iter()).collect();
    let mut seating = Seating::new();
    for (s, slot) in quotas.slots.iter().enumerate() {
        let mut elected = Vec::new();
        let mut backfill = Vec::new();
        for c in 1..=classes {
            let g = kept.remove(&(c, s)).unwrap_or_default();
            let want = quotas.counts[c - 1][s] as usize;
            let missing = want - g.len();
            elected.extend(g.into_iter().map(|(v, _, id)| (v, id)));
            for _ in 0..missing {
                let (_, id) = pools[c].next().ok_or(Error::QuotaInfeasible {
                    class: c,
                    needed: quotas.n_c_all(c),
                    available: mu[c],
                })?;
                backfill.push(id);
            }
        }
        elected.sort_unstable();
        let mut members: Vec<MinerId> = elected.into_iter().map(|(_, id)| id).collect();
        members.extend(backfill);
        seating.insert(*slot, members);
    }
    Ok(seating)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Behavior, ModuleId};

    fn slot(m: u8) -> SlotId {
        SlotId {
            sidechain: SidechainId::primary(ModuleId(m)),
            rank: 0,
        }
    }

    fn population(n: usize) -> (Vec<VrfKeypair>, Vec<(f64, [u8; 32])>) {
        let keys: Vec<_> = (0..n)
            .map(|i| {
                let mut s = [0u8; 32];
                s[0] = i as u8;
                s[1] = 0xAA;
                VrfKeypair::from_seed(s)
            })
            .collect();
        let pop = keys.iter().enumerate().map(|(i, k)| (i as f64, k.public())).collect();
        (keys, pop)
    }

    #[test]
    fn range_partition() {
        let q = ClassQuota::new(vec![slot(1), slot(2)], vec![vec![3, 1]]).unwrap();
        let v = (0.70 * 2f64.powi(64)) as u64;
        assert_eq!(q.slot_for(1, v), Some(0));
        let v = (0.80 * 2f64.powi(64)) as u64;
        assert_eq!(q.slot_for(1, v), Some(1));
    }

    #[test]
    fn full_quota_elects_everyone_and_zero_quota_nobody() {
        let (keys, pop) = population(8);
        // two classes of 4
        let q = ClassQuota::new(vec![slot(1), slot(2)], vec![vec![2, 2], vec![0, 0]]).unwrap();
        for (i, kp) in keys.iter().enumerate() {
            let r = elect(&[1; 32], &[2; 32], kp, pop[i].0, &pop, &q).unwrap();
            assert_eq!(r.assignment.is_some(), r.class == 1);
            assert!(verify_election(&r, &[1; 32], &[2; 32], &pop, &q));
        }
        let over = ClassQuota::new(vec![slot(1)], vec![vec![5], vec![0]]).unwrap();
        assert!(matches!(
            elect(&[1; 32], &[2; 32], &keys[7], pop[7].0, &pop, &over),
            Err(Error::QuotaInfeasible { .. })
        ));
    }

    #[test]
    fn tampering_detected() {
        let (keys, pop) = population(8);
        let q = ClassQuota::new(vec![slot(1), slot(2)], vec![vec![2, 2], vec![1, 1]]).unwrap();
        let r = elect(&[1; 32], &[2; 32], &keys[7], pop[7].0, &pop, &q).unwrap();
        assert!(r.assignment.is_some());
        let mut t = r.clone();
        t.assignment = Some(if r.assignment == Some(slot(1)) { slot(2) } else { slot(1) });
        assert!(!verify_election(&t, &[1; 32], &[2; 32], &pop, &q));

        // a loser that claims a seat
        let loser = (0..8)
            .map(|i| elect(&[5; 32], &[6; 32], &keys[i], pop[i].0, &pop, &q).unwrap())
            .find(|r| r.assignment.is_none())
            .expect("some miner loses the coin flip");
        let mut forged = loser.clone();
        forged.assignment = Some(slot(1));
        forged.rnd2 = Some(loser.rnd1);
        assert!(!verify_election(&forged, &[5; 32], &[6; 32], &pop, &q));
    }

    fn miners(n: usize, classes: usize) -> (Vec<MinerRecord>, Vec<VrfKeypair>) {
        let (keys, pop) = population(n);
        let cls = super::super::score::assign_classes(&pop, classes).unwrap();
        let recs = (0..n)
            .map(|i| MinerRecord {
                id: i as u32,
                pk: pop[i].1,
                mining_power: pop[i].0,
                participation: 0,
                disputes: 0,
                score: pop[i].0,
                class: cls[i],
                behavior: Behavior::Honest,
            })
            .collect();
        (recs, keys)
    }

    #[test]
    fn weighted_seating_has_exact_quotas() {
        let (recs, keys) = miners(60, 2);
        let q = ClassQuota::new(vec![slot(1), slot(2), slot(3)], vec![vec![4, 3, 2], vec![1, 2, 3]]).unwrap();
        let eligible: Vec<u32> = (0..60).collect();
        let seat = sortition_weighted(&[9; 32], &[8; 32], &recs, &keys, &eligible, &q, Exec::Sequential).unwrap();
        for (s, members) in q.slots.iter().zip([(4, 1), (3, 2), (2, 3)]) {
            let got = &seat[s];
            let c1 = got.iter().filter(|&&m| recs[m as usize].class == 1).count();
            assert_eq!((c1, got.len() - c1), members);
        }
        let mut all: Vec<_> = seat.values().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 15);
        let par = sortition_weighted(&[9; 32], &[8; 32], &recs, &keys, &eligible, &q, Exec::Parallel).unwrap();
        assert_eq!(seat, par);
    }

    #[test]
    fn random_seating_is_disjoint() {
        let (recs, keys) = miners(30, 1);
        let eligible: Vec<u32> = (0..30).collect();
        let seat = sortition_random(&[1; 32], &recs, &keys, &eligible, &[(slot(1), 10), (slot(2), 10)], Exec::Sequential)
            .unwrap();
        let mut all: Vec<_> = seat.values().flatten().copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
        assert!(matches!(
            sortition_random(&[1; 32], &recs, &keys, &eligible, &[(slot(1), 31)], Exec::Sequential),
            Err(Error::NoCapacity)
        ));
    }
}

#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;

use chainscale::chains::summary::produce_summary_block;
use chainscale::chains::subchains::route_to_subchain;
use chainscale::config::{ScenarioConfig, ScriptedEvent};
use chainscale::election::sortition::{sortition_random, sortition_weighted, vrf_input};
use chainscale::election::{assign_classes, vrf_verify, ClassQuota, SlotId, VrfKeypair};
use chainscale::orchestrator::{run_experiment, RunOutput};
use chainscale::traffic::{ChainTarget, ModuleTable};
use chainscale::types::{
    decode_transaction_with, encode_transaction, Behavior, MetaBlock, MinerRecord, ModuleId, Outcome, Payload,
    SidechainId, SyncRef, Terms, Transaction, TxKind,
};
use chainscale::election::analysis::{
    autorecovery_failure, committee_failure_exact_hypergeometric, committee_failure_weighted,
};
use chainscale::Exec;

pub const CASES: u32 = 500;

/// Exhaustive Pr(at least theta misbehave) over every per-member outcome.
pub fn brute_weighted(n: &[u64], p: &[f64], theta: u64) -> f64 {
    let rates: Vec<f64> = n.iter().zip(p).flat_map(|(&k, &q)| std::iter::repeat(q).take(k as usize)).collect();
    let total = rates.len();
    let mut sum = 0.0;
    for mask in 0u32..(1 << total) {
        if u64::from(mask.count_ones()) < theta {
            continue;
        }
        let mut pr = 1.0;
        for (i, q) in rates.iter().enumerate() {
            pr *= if mask >> i & 1 == 1 { *q } else { 1.0 - q };
        }
        sum += pr;
    }
    sum
}

/// Exact rational probability of one labelled draw sequence from a pool of
/// `pool` items with `bad` marked, as (numerator, denominator).
fn sequence_prob(labels: &[bool], pool: u64, bad: u64) -> (u128, u128) {
    let (mut num, mut den) = (1u128, 1u128);
    let (mut left, mut bad_left) = (pool, bad);
    for &is_bad in labels {
        let ways = if is_bad { bad_left } else { left - bad_left };
        num *= u128::from(ways);
        den *= u128::from(left);
        if ways == 0 {
            return (0, 1);
        }
        left -= 1;
        if is_bad {
            bad_left -= 1;
        }
    }
    (num, den)
}

/// Exhaustive hypergeometric tail: class i draws n[i] from mu members, m[i] marked.
pub fn brute_hypergeometric(mu: u64, m: &[u64], n: &[u64], theta: u64) -> f64 {
    let total: u64 = n.iter().sum();
    let mut sum = 0.0;
    for mask in 0u32..(1 << total) {
        if u64::from(mask.count_ones()) < theta {
            continue;
        }
        let mut pr = 1.0;
        let mut offset = 0;
        for (&mi, &ni) in m.iter().zip(n) {
            let labels: Vec<bool> = (offset..offset + ni).map(|i| mask >> i & 1 == 1).collect();
            let (a, b) = sequence_prob(&labels, mu, mi);
            pr *= a as f64 / b as f64;
            offset += ni;
        }
        sum += pr;
    }
    sum
}

/// Exhaustive all-committees-fail probability: (kappa+1) committees of
/// s_c drawn in order without replacement from n miners, m misbehaving.
pub fn brute_autorecovery(n: u64, m: u64, s_c: u64, kappa: u64, theta: u64) -> f64 {
    let draws = (kappa + 1) * s_c;
    let (mut num, mut den) = (0u128, 1u128);
    for mask in 0u32..(1 << draws) {
        let labels: Vec<bool> = (0..draws).map(|i| mask >> i & 1 == 1).collect();
        let all_fail = labels
            .chunks(s_c as usize)
            .all(|c| c.iter().filter(|&&b| b).count() as u64 >= theta);
        if !all_fail {
            continue;
        }
        let (a, b) = sequence_prob(&labels, n, m);
        if a == 0 {
            continue;
        }
        // every sequence shares the same denominator n^(draws falling)
        if den == 1 {
            den = b;
        }
        debug_assert_eq!(den, b);
        num += a;
    }
    num as f64 / den as f64
}

pub const ORACLE_TOL: f64 = 1e-12;

fn close(got: f64, want: f64, what: String) -> Result<(), String> {
    if (got - want).abs() <= ORACLE_TOL {
        Ok(())
    } else {
        Err(format!("{what}: {got} vs enumeration {want}"))
    }
}

/// Two-class weighted tails for every committee of at most 12 members.
pub fn oracle_weighted() -> Result<usize, String> {
    let rates = [0.0, 0.05, 0.15, 0.25, 0.35, 0.5, 1.0];
    let mut checked = 0;
    for n1 in 0..=12u64 {
        for n2 in 0..=(12 - n1) {
            for &p1 in &rates {
                for &p2 in &rates {
                    for theta in 0..=n1 + n2 {
                        let got = committee_failure_weighted(&[n1, n2], &[p1, p2], theta).map_err(|e| e.to_string())?;
                        let want = brute_weighted(&[n1, n2], &[p1, p2], theta);
                        close(got, want, format!("weighted n=({n1},{n2}) p=({p1},{p2}) theta={theta}"))?;
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(checked)
}

/// Two-class hypergeometric tails for every committee of at most 12 members.
pub fn oracle_hypergeometric() -> Result<usize, String> {
    let mut checked = 0;
    for mu in [6u64, 9, 14] {
        for n1 in 0..=mu.min(12) {
            for n2 in 0..=mu.min(12 - n1) {
                for m1 in (0..=mu).step_by(2) {
                    for m2 in [0, mu / 3, mu] {
                        for theta in 0..=n1 + n2 {
                            let got = committee_failure_exact_hypergeometric(mu, &[m1, m2], &[n1, n2], theta)
                                .map_err(|e| e.to_string())?;
                            let want = brute_hypergeometric(mu, &[m1, m2], &[n1, n2], theta);
                            close(got, want, format!("hypergeometric mu={mu} m=({m1},{m2}) n=({n1},{n2}) theta={theta}"))?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(checked)
}

/// All-committees-fail probability for every (kappa+1)*S_c <= 12.
pub fn oracle_autorecovery() -> Result<usize, String> {
    let mut checked = 0;
    for s_c in 1..=12u64 {
        for kappa in 0..12 / s_c {
            let draws = (kappa + 1) * s_c;
            for n in [draws, draws + 1, draws + 3, draws.max(16)] {
                for m in 0..=n {
                    for theta in 0..=s_c {
                        let got = autorecovery_failure(n, m, s_c, kappa, theta).map_err(|e| e.to_string())?;
                        let want = brute_autorecovery(n, m, s_c, kappa, theta);
                        close(got, want, format!("autorecovery N={n} M={m} S_c={s_c} kappa={kappa} theta={theta}"))?;
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(checked)
}

/// Desk-scale scenario from the shipped config.
pub fn desk(seed: u64) -> ScenarioConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))
        .expect("configs/desk.toml");
    let mut c = ScenarioConfig::from_toml_str(&text).expect("desk config parses");
    c.seed = seed;
    c
}

/// Small scenario for property runs.
pub fn tiny(seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.seed = seed;
    c.miners.count = 60;
    c.committee.size = 7;
    c.committee.backups = 1;
    c.traffic.contracts_per_node = 1;
    c.rounds = 6;
    c.epoch_rounds = 3;
    c
}

pub fn run(c: &ScenarioConfig) -> RunOutput {
    run_experiment(c, Exec::Sequential).expect("run completes")
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn outcome(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg.into()))
    }
}

/// Every payment finalized on a sidechain reaches the mainchain exactly
/// once, and value is neither created nor destroyed.
pub fn payment_conservation() -> Result<(), String> {
    outcome(runner().run(&(any::<u64>(), 0.0..0.3f64), |(seed, dispute_rate)| {
        let mut c = tiny(seed);
        c.traffic.dispute_rate = dispute_rate;
        let out = run(&c);
        let paid: u64 = out.final_state.vars.payments.values().sum();
        check(paid == out.meta_payment_total, format!("paid {paid} vs finalized {}", out.meta_payment_total))?;
        let value = |s: &chainscale::chains::mainchain::LedgerState| {
            s.balances.values().sum::<u64>() + s.escrows.values().sum::<u64>()
        };
        check(value(&out.genesis_state) == value(&out.final_state), "total value changed")?;
        let escrow_in: u64 = out.genesis_state.escrows.values().sum::<u64>() + out.escrow_created_total;
        let escrow_out: u64 = out.final_state.escrows.values().sum();
        check(escrow_in == escrow_out + paid, "escrow ledger does not balance")
    }))
}

fn arb_meta(module: ModuleId, epoch: u32) -> impl Strategy<Value = MetaBlock> {
    let tx = (1u64..8, 0u8..6, 1u64..50, any::<u64>()).prop_map(move |(cid, kind, amount, id)| {
        let terms = Terms {
            server: 1,
            client: 2,
            price_per_round: amount,
            duration_rounds: 5,
        };
        let (kind, payload) = match kind {
            0 => (TxKind::ServiceProof, Payload::None),
            1 => (TxKind::ServicePayment, Payload::None),
            2 => (TxKind::Agreement, Payload::Deal(terms)),
            3 => (
                TxKind::Dispute,
                Payload::Dispute {
                    proof_id: id,
                    outcome: Outcome::Penalize,
                },
            ),
            4 => (TxKind::Ask, Payload::None),
            _ => (TxKind::Offer, Payload::None),
        };
        Transaction {
            id,
            prefix: module.0,
            kind,
            contract_id: Some(cid),
            issuer: 0,
            amount,
            valid: true,
            size_bytes: 100,
            created_round: 0,
            payload,
        }
    });
    (proptest::collection::vec(tx, 0..12), 0u32..30).prop_map(move |(txs, round)| MetaBlock {
        sidechain: SidechainId::primary(module),
        epoch,
        round,
        txs,
        capacity_bytes: 1_000_000,
        empty: false,
    })
}

/// Same meta-blocks give the same summary bytes regardless of which
/// sub-sidechain is read first. Contracts are routed to one sub-sidechain
/// per epoch, so their ids are disjoint across sub-sidechains.
pub fn summary_determinism() -> Result<(), String> {
    let m = ModuleId::PAYMENT;
    let chains = proptest::collection::vec(proptest::collection::vec(arb_meta(m, 5), 0..5), 1..4);
    outcome(runner().run(&(chains, any::<u64>()), |(mut chains, shuffle_seed)| {
        for (sub, metas) in chains.iter_mut().enumerate() {
            for meta in metas.iter_mut() {
                meta.sidechain.sub = sub as u8;
                for tx in &mut meta.txs {
                    tx.contract_id = tx.contract_id.map(|c| c * 4 + sub as u64);
                }
            }
        }
        let flat: Vec<MetaBlock> = chains.iter().flatten().cloned().collect();
        let a = produce_summary_block(m, 5, flat.iter());
        let b = produce_summary_block(m, 5, flat.iter());
        check(a.encode() == b.encode() && a.digest() == b.digest(), "summary not reproducible")?;
        let mut order = chains.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(shuffle_seed);
        order.shuffle(&mut rng);
        let shuffled: Vec<MetaBlock> = order.into_iter().flatten().collect();
        let c = produce_summary_block(m, 5, shuffled.iter());
        check(a.encode() == c.encode(), "summary depends on sub-sidechain order")
    }))
}

fn payload_for(kind: TxKind, id: u64) -> Payload {
    match kind {
        TxKind::Agreement => Payload::Deal(Terms {
            server: 1,
            client: 2,
            price_per_round: 3,
            duration_rounds: 4,
        }),
        TxKind::Dispute => Payload::Dispute {
            proof_id: id,
            outcome: Outcome::Dismiss,
        },
        TxKind::Transfer => Payload::Transfer { to: 9 },
        TxKind::Sync => Payload::Sync(SyncRef {
            module: ModuleId::DISPUTE,
            first_epoch: 1,
            last_epoch: 2,
            entries: 3,
            digest: id,
        }),
        _ => Payload::None,
    }
}

/// Prefix annotation and classification agree for every transaction type,
/// the wire encoding round-trips, and sub-sidechain routing is stable.
pub fn routing_soundness() -> Result<(), String> {
    let strat = (
        0usize..TxKind::ALL.len(),
        any::<u64>(),
        any::<u64>(),
        1u32..16,
        any::<u32>(),
        1u32..5000,
        any::<bool>(),
    );
    outcome(runner().run(&strat, |(k, id, cid, n, epoch, size, single)| {
        let kind = TxKind::ALL[k];
        let table = if single { ModuleTable::single_sidechain() } else { ModuleTable::chainscale() };
        let target = table.target_of(kind);
        let prefix = table.annotate(kind);
        check(target.is_ok() == prefix.is_ok(), "annotate and target_of disagree on coverage")?;
        if let (Ok(target), Ok(prefix)) = (target, prefix) {
            check(table.classify_prefix(prefix).ok() == Some(target), "prefix routes elsewhere")?;
            check(
                matches!(target, ChainTarget::Sidechain(_)) == kind.is_service(),
                "service types must live on sidechains",
            )?;
            let tx = Transaction {
                id,
                prefix,
                kind,
                contract_id: Some(cid),
                issuer: 3,
                amount: 7,
                valid: true,
                size_bytes: size.max(64),
                created_round: 2,
                payload: payload_for(kind, id),
            };
            let back = decode_transaction_with(&encode_transaction(&tx), &table);
            check(back.as_ref().ok() == Some(&tx), format!("round trip failed: {back:?}"))?;
        }
        let s = route_to_subchain(cid, epoch, 9, n);
        check(s < n && s == route_to_subchain(cid, epoch, 9, n), "routing out of range or unstable")
    }))
}

fn population(n: usize, seed: u64, classes: usize) -> (Vec<MinerRecord>, Vec<VrfKeypair>) {
    let keys: Vec<VrfKeypair> = (0..n)
        .map(|i| VrfKeypair::from_seed(chainscale::seed::derive(seed, "prop-key", &[i as u64])))
        .collect();
    let scores: Vec<f64> = (0..n)
        .map(|i| (chainscale::seed::hash_u64(seed, "prop-score", &[i as u64]) % 1000) as f64)
        .collect();
    let pop: Vec<(f64, [u8; 32])> = scores.iter().zip(&keys).map(|(s, k)| (*s, k.public())).collect();
    let cls = assign_classes(&pop, classes).expect("classes");
    let miners = (0..n)
        .map(|i| MinerRecord {
            id: i as u32,
            pk: keys[i].public(),
            mining_power: scores[i],
            participation: 0,
            disputes: 0,
            score: scores[i],
            class: cls[i],
            behavior: Behavior::Honest,
        })
        .collect();
    (miners, keys)
}

/// Seated committees match their class quotas exactly, are disjoint, and
/// only hold members of the right class; random seating sizes are exact.
pub fn sortition_composition() -> Result<(), String> {
    let strat = (20usize..48, any::<u64>(), proptest::collection::vec((0u64..4, 0u64..4), 1..4));
    outcome(runner().run(&strat, |(n, seed, slot_counts)| {
        let (miners, keys) = population(n, seed, 2);
        let eligible: Vec<u32> = (0..n as u32).collect();
        let per_class = |c: usize| miners.iter().filter(|m| m.class == c).count() as u64;
        let need1: u64 = slot_counts.iter().map(|s| s.0).sum();
        let need2: u64 = slot_counts.iter().map(|s| s.1).sum();
        prop_assume!(need1 <= per_class(1) && need2 <= per_class(2));
        let slots: Vec<SlotId> = (0..slot_counts.len())
            .map(|i| SlotId {
                sidechain: SidechainId {
                    module: ModuleId(1),
                    sub: i as u8,
                },
                rank: 0,
            })
            .collect();
        let counts = vec![
            slot_counts.iter().map(|s| s.0).collect(),
            slot_counts.iter().map(|s| s.1).collect(),
        ];
        let quota = ClassQuota::new(slots.clone(), counts).expect("quota");
        let s1 = chainscale::seed::derive(seed, "s1", &[]);
        let s2 = chainscale::seed::derive(seed, "s2", &[]);
        let seating = sortition_weighted(&s1, &s2, &miners, &keys, &eligible, &quota, Exec::Sequential)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for (i, slot) in slots.iter().enumerate() {
            let members = &seating[slot];
            for (c, want) in [(1usize, slot_counts[i].0), (2, slot_counts[i].1)] {
                let got = members.iter().filter(|&&m| miners[m as usize].class == c).count() as u64;
                check(got == want, format!("slot {i} class {c}: {got} seated, {want} wanted"))?;
            }
            check(members.len() as u64 == slot_counts[i].0 + slot_counts[i].1, "foreign members seated")?;
            for &m in members {
                check(seen.insert(m), "miner seated twice")?;
            }
        }
        let sized: Vec<(SlotId, u64)> = slots.iter().zip(&slot_counts).map(|(s, c)| (*s, c.0 + c.1)).collect();
        let random = sortition_random(&s1, &miners, &keys, &eligible, &sized, Exec::Sequential)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (slot, size) in &sized {
            check(random[slot].len() as u64 == *size, "random committee size")?;
        }
        Ok(())
    }))
}

/// Honest outputs verify; altered outputs, inputs or keys do not.
pub fn vrf_completeness_soundness() -> Result<(), String> {
    let strat = (any::<[u8; 32]>(), any::<[u8; 32]>(), any::<[u8; 32]>(), 0usize..3);
    outcome(runner().run(&strat, |(sk, other, seed, tamper)| {
        prop_assume!(sk != other);
        let kp = VrfKeypair::from_seed(sk);
        let pk = kp.public();
        let input = vrf_input(&seed, &pk);
        let out = kp.eval(&input);
        check(vrf_verify(&pk, &input, &out), "honest output rejected")?;
        check(kp.eval(&input) == out, "evaluation not deterministic")?;
        let mut bad = out;
        let mut bad_input = input;
        let mut bad_pk = pk;
        match tamper {
            0 => bad.value ^= 1,
            1 => bad_input[0] ^= 1,
            _ => bad_pk = VrfKeypair::from_seed(other).public(),
        }
        check(!vrf_verify(&bad_pk, &bad_input, &bad), format!("tampered output accepted ({tamper})"))
    }))
}

fn module_name(i: u8) -> &'static str {
    ["match", "payment", "dispute"][i as usize]
}

/// While the dispute chain is stalled, the chains that depend on it only
/// mine empty blocks.
pub fn gating_soundness() -> Result<(), String> {
    let strat = (any::<u64>(), 0u32..5, 0u32..3, 3u32..12);
    outcome(runner().run(&strat, |(seed, round, offset, duration)| {
        let mut c = tiny(seed);
        c.events.push(ScriptedEvent::Stall {
            module: "dispute".into(),
            sub: 0,
            round,
            offset,
            duration,
        });
        let out = run(&c);
        let gated: Vec<_> = out.metas.iter().filter(|m| m.gated).collect();
        check(!gated.is_empty(), "stall never gated a dependent")?;
        check(gated.iter().all(|m| m.txs == 0), "a gated meta-block carried transactions")?;
        check(
            gated.iter().all(|m| m.chain.module != ModuleId::DISPUTE),
            "dispute chain gated on itself",
        )
    }))
}

fn arb_event() -> impl Strategy<Value = ScriptedEvent> {
    prop_oneof![
        (0u8..3, 0u32..6, 0u32..3).prop_map(|(m, round, offset)| ScriptedEvent::CommitteeFailure {
            module: module_name(m).into(),
            sub: 0,
            round,
            offset,
        }),
        (0u8..3, 0u32..6, 0u32..3).prop_map(|(m, round, offset)| ScriptedEvent::LeaderFailure {
            module: module_name(m).into(),
            sub: 0,
            round,
            offset,
        }),
        (0u8..3, 0u32..6, 0u32..3, 1u32..10).prop_map(|(m, round, offset, duration)| ScriptedEvent::Stall {
            module: module_name(m).into(),
            sub: 0,
            round,
            offset,
            duration,
        }),
        (1u32..8).prop_map(|round| ScriptedEvent::Rollback { round, depth: 1 }),
    ]
}

/// Interruptions delay liveness but leave final mainchain state unchanged.
pub fn twin_run_equivalence() -> Result<(), String> {
    let strat = (any::<u64>(), proptest::collection::vec(arb_event(), 1..4));
    outcome(runner().run(&strat, |(seed, events)| {
        let mut base = tiny(seed);
        base.chains.confirmation_depth = 2;
        let twin = run(&base);
        let mut c = base.clone();
        c.events = events;
        let out = run(&c);
        check(out.final_state.vars == twin.final_state.vars, "state_vars diverged")?;
        check(out.final_state.balances == twin.final_state.balances, "balances diverged")?;
        check(out.final_state.escrows == twin.final_state.escrows, "escrows diverged")
    }))
}

pub fn suites() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("payment conservation", payment_conservation),
        ("summary determinism", summary_determinism),
        ("routing soundness", routing_soundness),
        ("sortition composition", sortition_composition),
        ("VRF completeness and soundness", vrf_completeness_soundness),
        ("gating soundness", gating_soundness),
        ("twin-run equivalence", twin_run_equivalence),
    ]
}

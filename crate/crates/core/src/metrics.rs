//! Append-only observation log, CSV persistence and report aggregation.
//!
//! Observations file (`observations_<run_id>.csv`):
//!
//! ```text
//! # chainscale observations v1
//! run_id,round,tick,chain,kind,tx_id,epoch,latency_ticks,bytes,count,flag
//! ```
//!
//! Report file (`report_<run_id>.csv`): one header line and one row with the
//! fields of [`MetricsReport`] except the series, which goes to
//! `series_<run_id>.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::MAIN_ROUND_SECONDS;
use crate::error::{Error, Result};

pub const OBS_SCHEMA: &str = "# chainscale observations v1";
pub const REPORT_SCHEMA: &str = "# chainscale report v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsKind {
    TxConfirmed { tx_id: u64, latency_ticks: u64, size: u64 },
    TxRejected { tx_id: u64 },
    BlockProduced { bytes: u64, txs: u64, empty: bool },
    SummaryStored { epoch: u32, bytes: u64 },
    SyncConfirmed { epoch: u32 },
    Pruned { epoch: u32, bytes_freed: u64 },
    CrossChainForward { tx_id: u64 },
    /// A validation that needed another module's un-finalized state.
    CrossChainRead { count: u64 },
    CommitteeFailed { rank: u32 },
    ViewChange,
    Recovered { ticks: u64 },
    RunEnd { main_rounds: u64, side_rounds: u64, generated: u64 },
}

impl ObsKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObsKind::TxConfirmed { .. } => "tx_confirmed",
            ObsKind::TxRejected { .. } => "tx_rejected",
            ObsKind::BlockProduced { .. } => "block_produced",
            ObsKind::SummaryStored { .. } => "summary_stored",
            ObsKind::SyncConfirmed { .. } => "sync_confirmed",
            ObsKind::Pruned { .. } => "pruned",
            ObsKind::CrossChainForward { .. } => "cross_chain_forward",
            ObsKind::CrossChainRead { .. } => "cross_chain_read",
            ObsKind::CommitteeFailed { .. } => "committee_failed",
            ObsKind::ViewChange => "view_change",
            ObsKind::Recovered { .. } => "recovered",
            ObsKind::RunEnd { .. } => "run_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub round: u32,
    pub tick: u64,
    pub chain: String,
    pub kind: ObsKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    run_id: String,
    round: u32,
    tick: u64,
    chain: String,
    kind: String,
    tx_id: u64,
    epoch: u32,
    latency_ticks: u64,
    bytes: u64,
    count: u64,
    flag: u8,
}

impl Observation {
    fn to_row(&self, run_id: &str) -> Row {
        let mut r = Row {
            run_id: run_id.to_string(),
            round: self.round,
            tick: self.tick,
            chain: self.chain.clone(),
            kind: self.kind.name().to_string(),
            tx_id: 0,
            epoch: 0,
            latency_ticks: 0,
            bytes: 0,
            count: 0,
            flag: 0,
        };
        match self.kind {
            ObsKind::TxConfirmed { tx_id, latency_ticks, size } => {
                r.tx_id = tx_id;
                r.latency_ticks = latency_ticks;
                r.bytes = size;
            }
            ObsKind::TxRejected { tx_id } | ObsKind::CrossChainForward { tx_id } => r.tx_id = tx_id,
            ObsKind::BlockProduced { bytes, txs, empty } => {
                r.bytes = bytes;
                r.count = txs;
                r.flag = u8::from(empty);
            }
            ObsKind::SummaryStored { epoch, bytes } | ObsKind::Pruned { epoch, bytes_freed: bytes } => {
                r.epoch = epoch;
                r.bytes = bytes;
            }
            ObsKind::SyncConfirmed { epoch } => r.epoch = epoch,
            ObsKind::CrossChainRead { count } => r.count = count,
            ObsKind::CommitteeFailed { rank } => r.count = u64::from(rank),
            ObsKind::ViewChange => {}
            ObsKind::Recovered { ticks } => r.latency_ticks = ticks,
            ObsKind::RunEnd {
                main_rounds,
                side_rounds,
                generated,
            } => {
                r.count = generated;
                r.latency_ticks = side_rounds;
                r.bytes = main_rounds;
            }
        }
        r
    }

    fn from_row(r: &Row) -> Result<Self> {
        let kind = match r.kind.as_str() {
            "tx_confirmed" => ObsKind::TxConfirmed {
                tx_id: r.tx_id,
                latency_ticks: r.latency_ticks,
                size: r.bytes,
            },
            "tx_rejected" => ObsKind::TxRejected { tx_id: r.tx_id },
            "block_produced" => ObsKind::BlockProduced {
                bytes: r.bytes,
                txs: r.count,
                empty: r.flag != 0,
            },
            "summary_stored" => ObsKind::SummaryStored {
                epoch: r.epoch,
                bytes: r.bytes,
            },
            "sync_confirmed" => ObsKind::SyncConfirmed { epoch: r.epoch },
            "pruned" => ObsKind::Pruned {
                epoch: r.epoch,
                bytes_freed: r.bytes,
            },
            "cross_chain_forward" => ObsKind::CrossChainForward { tx_id: r.tx_id },
            "cross_chain_read" => ObsKind::CrossChainRead { count: r.count },
            "committee_failed" => ObsKind::CommitteeFailed { rank: r.count as u32 },
            "view_change" => ObsKind::ViewChange,
            "recovered" => ObsKind::Recovered { ticks: r.latency_ticks },
            "run_end" => ObsKind::RunEnd {
                main_rounds: r.bytes,
                side_rounds: r.latency_ticks,
                generated: r.count,
            },
            other => return Err(Error::Invariant(format!("unknown observation kind `{other}`"))),
        };
        Ok(Observation {
            round: r.round,
            tick: r.tick,
            chain: r.chain.clone(),
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub round: u32,
    pub confirmed: u64,
    pub storage_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub main_rounds: u64,
    pub generated: u64,
    pub confirmed: u64,
    pub rejected: u64,
    /// Confirmed transactions per mainchain round.
    pub throughput: f64,
    pub confirmation_time_s: f64,
    pub storage_mb: f64,
    pub ctr_percent: f64,
    pub cross_chain_reads: u64,
    pub committee_failures: u64,
    pub view_changes: u64,
    pub syncs_confirmed: u64,
    /// Mean time from a failure to the next block, if any failure recovered.
    pub recovery_time_min: Option<f64>,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
}

/// Append-only store for one run.
#[derive(Debug, Clone, Default)]
pub struct MetricsStore {
    run_id: String,
    obs: Vec<Observation>,
    confirmed: BTreeSet<u64>,
}

impl MetricsStore {
    pub fn new(run_id: impl Into<String>) -> Self {
        MetricsStore {
            run_id: run_id.into(),
            ..Default::default()
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn record(&mut self, obs: Observation) -> Result<()> {
        if let ObsKind::TxConfirmed { tx_id, .. } = obs.kind {
            if !self.confirmed.insert(tx_id) {
                return Err(Error::Invariant(format!("transaction {tx_id} confirmed twice")));
            }
        }
        self.obs.push(obs);
        Ok(())
    }

    pub fn is_confirmed(&self, tx_id: u64) -> bool {
        self.confirmed.contains(&tx_id)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        aggregate(&self.run_id, &self.obs)
    }

    pub fn write_observations(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("observations_{}.csv", self.run_id));
        let mut f = fs::File::create(&path)?;
        writeln!(f, "{OBS_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(f);
        for o in &self.obs {
            w.serialize(o.to_row(&self.run_id))?;
        }
        w.flush()?;
        Ok(path)
    }
}

pub fn read_observations(path: &Path) -> Result<(String, Vec<Observation>)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != OBS_SCHEMA {
        return Err(Error::Invariant(format!("{}: missing schema line", path.display())));
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut run_id = String::new();
    let mut out = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row?;
        run_id.clone_from(&row.run_id);
        out.push(Observation::from_row(&row)?);
    }
    Ok((run_id, out))
}

fn fixed(x: f64) -> f64 {
    // 9 significant decimals keep reports stable through text round trips
    (x * 1e9).round() / 1e9
}

pub fn aggregate(run_id: &str, obs: &[Observation]) -> Result<MetricsReport> {
    let mut end = None;
    let mut confirmed = 0u64;
    let mut latency_sum = 0u128;
    let mut rejected = BTreeSet::new();
    let mut forwarded = BTreeSet::new();
    let mut reads = 0u64;
    let mut failures = 0u64;
    let mut view_changes = 0u64;
    let mut syncs = 0u64;
    let mut recovered = Vec::new();
    let mut storage: i128 = 0;
    let mut per_round: BTreeMap<u32, (u64, i128)> = BTreeMap::new();
    for o in obs {
        let slot = per_round.entry(o.round).or_default();
        match o.kind {
            ObsKind::TxConfirmed { latency_ticks, .. } => {
                confirmed += 1;
                latency_sum += u128::from(latency_ticks);
                slot.0 += 1;
            }
            ObsKind::TxRejected { tx_id } => {
                rejected.insert(tx_id);
            }
            ObsKind::BlockProduced { bytes, .. } | ObsKind::SummaryStored { bytes, .. } => {
                storage += i128::from(bytes);
                slot.1 += i128::from(bytes);
            }
            ObsKind::Pruned { bytes_freed, .. } => {
                storage -= i128::from(bytes_freed);
                slot.1 -= i128::from(bytes_freed);
            }
            ObsKind::SyncConfirmed { .. } => syncs += 1,
            ObsKind::CrossChainForward { tx_id } => {
                forwarded.insert(tx_id);
            }
            ObsKind::CrossChainRead { count } => reads += count,
            ObsKind::CommitteeFailed { .. } => failures += 1,
            ObsKind::ViewChange => view_changes += 1,
            ObsKind::Recovered { ticks } => recovered.push(ticks),
            ObsKind::RunEnd {
                main_rounds,
                side_rounds,
                generated,
            } => end = Some((main_rounds, side_rounds, generated)),
        }
    }
    let (main_rounds, side_rounds, generated) =
        end.ok_or_else(|| Error::IncompleteRun("no run_end observation".into()))?;
    let rejected = rejected.len() as u64;
    if confirmed + rejected < generated {
        return Err(Error::IncompleteRun(format!(
            "{} of {generated} transactions neither confirmed nor rejected",
            generated - confirmed - rejected
        )));
    }
    if storage < 0 {
        return Err(Error::Invariant("pruned more bytes than were stored".into()));
    }
    let tick_s = MAIN_ROUND_SECONDS / side_rounds.max(1) as f64;
    let mut cum_c = 0u64;
    let mut cum_s = 0i128;
    let series = per_round
        .into_iter()
        .map(|(round, (c, s))| {
            cum_c += c;
            cum_s += s;
            SeriesPoint {
                round,
                confirmed: cum_c,
                storage_bytes: cum_s.max(0) as u64,
            }
        })
        .collect();
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        main_rounds,
        generated,
        confirmed,
        rejected,
        throughput: fixed(if main_rounds == 0 { 0.0 } else { confirmed as f64 / main_rounds as f64 }),
        confirmation_time_s: fixed(if confirmed == 0 {
            0.0
        } else {
            latency_sum as f64 / confirmed as f64 * tick_s
        }),
        storage_mb: fixed(storage as f64 / 1e6),
        ctr_percent: fixed(if generated == 0 {
            0.0
        } else {
            forwarded.len() as f64 / generated as f64 * 100.0
        }),
        cross_chain_reads: reads,
        committee_failures: failures,
        view_changes,
        syncs_confirmed: syncs,
        recovery_time_min: (!recovered.is_empty())
            .then(|| fixed(recovered.iter().sum::<u64>() as f64 / recovered.len() as f64 * tick_s / 60.0)),
        series,
    })
}

const REPORT_HEADER: &str = "run_id,main_rounds,generated,confirmed,rejected,throughput,confirmation_time_s,storage_mb,ctr_percent,cross_chain_reads,committee_failures,view_changes,syncs_confirmed,recovery_time_min";

pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("report_{}.csv", report.run_id));
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{REPORT_SCHEMA}")?;
    writeln!(f, "{REPORT_HEADER}")?;
    writeln!(f, "{}", report_row(report))?;
    let mut s = fs::File::create(dir.join(format!("series_{}.csv", report.run_id)))?;
    writeln!(s, "round,confirmed,storage_bytes")?;
    for p in &report.series {
        writeln!(s, "{},{},{}", p.round, p.confirmed, p.storage_bytes)?;
    }
    Ok(path)
}

fn report_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.main_rounds,
        r.generated,
        r.confirmed,
        r.rejected,
        r.throughput,
        r.confirmation_time_s,
        r.storage_mb,
        r.ctr_percent,
        r.cross_chain_reads,
        r.committee_failures,
        r.view_changes,
        r.syncs_confirmed,
        r.recovery_time_min.map_or(String::new(), |v| v.to_string())
    )
}

/// Summary rows across runs.
pub fn write_summary(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{REPORT_SCHEMA}")?;
    writeln!(f, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(f, "{}", report_row(r))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ob(round: u32, kind: ObsKind) -> Observation {
        Observation {
            round,
            tick: u64::from(round) * 3,
            chain: "sc2".into(),
            kind,
        }
    }

    fn end(rounds: u64, generated: u64) -> ObsKind {
        ObsKind::RunEnd {
            main_rounds: rounds,
            side_rounds: 3,
            generated,
        }
    }

    #[test]
    fn throughput_and_latency() {
        let mut s = MetricsStore::new("t");
        for i in 0..100 {
            s.record(ob(i % 10, ObsKind::TxConfirmed { tx_id: u64::from(i), latency_ticks: 3, size: 10 })).unwrap();
        }
        s.record(ob(10, end(10, 100))).unwrap();
        let r = s.report().unwrap();
        assert_eq!(r.throughput, 10.0);
        assert_eq!(r.confirmation_time_s, 30.0);
        assert_eq!(r.ctr_percent, 0.0);
    }

    #[test]
    fn double_confirmation_rejected() {
        let mut s = MetricsStore::new("t");
        let c = ObsKind::TxConfirmed { tx_id: 5, latency_ticks: 3, size: 1 };
        s.record(ob(0, c)).unwrap();
        assert!(matches!(s.record(ob(1, c)), Err(Error::Invariant(_))));
    }

    #[test]
    fn prune_reduces_storage() {
        let mut s = MetricsStore::new("t");
        s.record(ob(0, ObsKind::BlockProduced { bytes: 1000, txs: 0, empty: true })).unwrap();
        s.record(ob(1, ObsKind::Pruned { epoch: 0, bytes_freed: 400 })).unwrap();
        s.record(ob(2, end(2, 0))).unwrap();
        let r = s.report().unwrap();
        assert_eq!(r.storage_mb, 0.0006);
        assert!(r.series[1].storage_bytes < r.series[0].storage_bytes);
    }

    #[test]
    fn incomplete_run_detected() {
        let mut s = MetricsStore::new("t");
        s.record(ob(0, end(1, 3))).unwrap();
        assert!(matches!(s.report(), Err(Error::IncompleteRun(_))));
    }

    #[test]
    fn file_round_trip_reproduces_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MetricsStore::new("rt");
        s.record(ob(0, ObsKind::TxConfirmed { tx_id: 1, latency_ticks: 7, size: 200 })).unwrap();
        s.record(ob(0, ObsKind::TxRejected { tx_id: 2 })).unwrap();
        s.record(ob(1, ObsKind::CrossChainForward { tx_id: 1 })).unwrap();
        s.record(ob(1, ObsKind::Recovered { ticks: 31 })).unwrap();
        s.record(ob(2, ObsKind::SummaryStored { epoch: 0, bytes: 77 })).unwrap();
        s.record(ob(3, end(3, 2))).unwrap();
        let path = s.write_observations(dir.path()).unwrap();
        let (id, obs) = read_observations(&path).unwrap();
        assert_eq!(id, "rt");
        assert_eq!(obs, s.observations());
        assert_eq!(aggregate(&id, &obs).unwrap(), s.report().unwrap());
    }
}

//! Monte Carlo time-to-recover under random and weighted committee election.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed;

/// Two or more score classes with their own misbehaving counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPopulation {
    pub class_sizes: Vec<u64>,
    pub class_bad: Vec<u64>,
    /// Per-committee seats drawn from each class.
    pub quotas: Vec<u64>,
}

impl WeightedPopulation {
    /// "W{w}-A{a}" style: two equal classes, `w` percent of each committee
    /// from the high-score class, whose misbehaving rate is `a` percent.
    /// Misbehaving miners that do not fit a class spill over to the other.
    pub fn two_class(n: u64, bad: u64, s_c: u64, w_percent: u64, a_percent: u64) -> Result<Self> {
        if bad > n || w_percent > 100 || a_percent > 100 {
            return Err(Error::InvalidCounts("bad > N or percentages above 100".into()));
        }
        let high = n / 2;
        let low = n - high;
        let want_high = (high * a_percent / 100).min(bad);
        let low_bad = (bad - want_high).min(low);
        let high_bad = bad - low_bad;
        let q_high = (s_c * w_percent).div_ceil(100).min(s_c);
        Ok(WeightedPopulation {
            class_sizes: vec![high, low],
            class_bad: vec![high_bad, low_bad],
            quotas: vec![q_high, s_c - q_high],
        })
    }

    pub fn committee_size(&self) -> u64 {
        self.quotas.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum McElection {
    Random,
    Weighted(WeightedPopulation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McParams {
    pub n: u64,
    pub p_lazy: f64,
    pub p_malicious: f64,
    pub s_c: u64,
    pub kappa: u64,
    pub theta_l: u64,
    pub step_in_minutes: f64,
    pub runs: u64,
    pub seed: u64,
    pub election: McElection,
}

impl McParams {
    /// round(p * N) lazy plus round(p * N) malicious miners.
    pub fn misbehaving(&self) -> u64 {
        let n = self.n as f64;
        ((self.p_lazy * n).round() + (self.p_malicious * n).round()) as u64
    }

    fn validate(&self) -> Result<()> {
        for (field, p) in [("p_lazy", self.p_lazy), ("p_malicious", self.p_malicious)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.s_c == 0 || self.theta_l > self.s_c {
            return Err(Error::config("theta_l", "need 0 < S_c and theta_l <= S_c"));
        }
        if self.misbehaving() > self.n {
            return Err(Error::config("p_malicious", "p_lazy + p_malicious exceeds 1"));
        }
        if !self.step_in_minutes.is_finite() || self.step_in_minutes < 0.0 {
            return Err(Error::config("step_in_minutes", "must be a nonnegative number"));
        }
        let seats = (self.kappa + 1) * self.s_c;
        match &self.election {
            McElection::Random if seats > self.n => Err(Error::config("kappa", "(kappa+1)*S_c exceeds N")),
            McElection::Weighted(w) => {
                if w.committee_size() != self.s_c {
                    return Err(Error::config("quotas", "class quotas must sum to S_c"));
                }
                if w.class_sizes.iter().sum::<u64>() != self.n || w.class_bad.iter().sum::<u64>() != self.misbehaving() {
                    return Err(Error::config("classes", "class sizes and misbehaving counts must match the population"));
                }
                for ((q, size), bad) in w.quotas.iter().zip(&w.class_sizes).zip(&w.class_bad) {
                    if (self.kappa + 1) * q > *size || bad > size {
                        return Err(Error::config("quotas", "a class cannot supply kappa+1 committees"));
                    }
                }
                Ok(())
            }
            McElection::Random => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    /// Committees that failed before the first success, per run.
    pub failed_before_success: Vec<u32>,
    /// Recovery time in minutes per run; runs where every committee failed
    /// are charged (kappa+1) step-ins.
    pub recovery_minutes: Vec<f64>,
    pub mean_minutes: f64,
    pub all_fail_rate: f64,
}

/// Misbehaving members of each of `committees` committees of the given
/// per-draw sizes, drawn without replacement from one pool.
fn draw_bad<R: Rng>(rng: &mut R, pool: u64, bad: u64, per: u64, committees: u64, out: &mut [u64]) {
    let picks = sample(rng, pool as usize, (per * committees) as usize);
    for (i, idx) in picks.into_iter().enumerate() {
        if (idx as u64) < bad {
            out[i / per as usize] += 1;
        }
    }
}

fn one_run(p: &McParams, bad: u64, run: u64) -> u32 {
    let mut rng = seed::rng(p.seed, "recover-mc", &[run]);
    let k = p.kappa + 1;
    let mut counts = vec![0u64; k as usize];
    match &p.election {
        McElection::Random => draw_bad(&mut rng, p.n, bad, p.s_c, k, &mut counts),
        McElection::Weighted(w) => {
            for ((size, b), q) in w.class_sizes.iter().zip(&w.class_bad).zip(&w.quotas) {
                if *q > 0 {
                    draw_bad(&mut rng, *size, *b, *q, k, &mut counts);
                }
            }
        }
    }
    counts.iter().take_while(|&&c| c >= p.theta_l).count() as u32
}

pub fn monte_carlo_recovery(p: &McParams, exec: Exec) -> Result<McReport> {
    p.validate()?;
    let bad = p.misbehaving();
    let failed: Vec<u32> = exec.map_range(p.runs, |r| one_run(p, bad, r));
    let k = (p.kappa + 1) as u32;
    let recovery_minutes: Vec<f64> = failed.iter().map(|&f| f64::from(f) * p.step_in_minutes).collect();
    let mean_minutes = recovery_minutes.iter().sum::<f64>() / p.runs as f64;
    let all_fail_rate = failed.iter().filter(|&&f| f == k).count() as f64 / p.runs as f64;
    Ok(McReport {
        failed_before_success: failed,
        recovery_minutes,
        mean_minutes,
        all_fail_rate,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MinerRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            alpha: 0.5,
            beta: 0.4,
            gamma: 0.1,
        }
    }
}

impl ScoreWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = ScoreWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma].iter().all(|v| *v >= 0.0)
            && (self.alpha + self.beta + self.gamma - 1.0).abs() <= 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidWeights(self.alpha, self.beta, self.gamma))
        }
    }
}

pub fn compute_score(record: &MinerRecord, w: &ScoreWeights) -> Result<f64> {
    w.validate()?;
    Ok(score_of(record.mining_power, record.participation as f64, record.disputes as f64, w))
}

pub fn score_of(power: f64, participation: f64, disputes: f64, w: &ScoreWeights) -> f64 {
    w.alpha * power + w.beta * participation - w.gamma * disputes
}

/// Ordering used for ranking: higher score first, then ascending pk.
fn outranks(a: (f64, &[u8; 32]), b: (f64, &[u8; 32])) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn class_from_rank(rank: usize, n: usize, classes: usize) -> usize {
    // upsilon = 1 - below/N = rank/N, class = ceil(upsilon * C)
    (rank * classes).div_ceil(n).clamp(1, classes)
}

/// Class of the miner with score `s` and key `pk` within `population`.
pub fn assign_class(s: f64, pk: &[u8; 32], population: &[(f64, [u8; 32])], classes: usize) -> Result<usize> {
    if population.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if classes == 0 {
        return Err(Error::config("committee.classes", "must be at least 1"));
    }
    let above = population
        .iter()
        .filter(|(os, opk)| outranks((*os, opk), (s, pk)))
        .count();
    Ok(class_from_rank(above + 1, population.len(), classes))
}

/// Classes for a whole population, index-aligned with the input.
pub fn assign_classes(population: &[(f64, [u8; 32])], classes: usize) -> Result<Vec<usize>> {
    if population.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if classes == 0 {
        return Err(Error::config("committee.classes", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, pa) = &population[a];
        let (sb, pb) = &population[b];
        sb.total_cmp(sa).then_with(|| pa.cmp(pb))
    });
    let mut out = vec![0; population.len()];
    for (i, idx) in order.into_iter().enumerate() {
        out[idx] = class_from_rank(i + 1, population.len(), classes);
    }
    Ok(out)
}

//! Committee failure probabilities.
//!
//! All distributions are built by convolving per-class pmfs; tails are summed
//! directly rather than as `1 - head` so values near 1e-15 keep their
//! relative precision. Large binomials are handled in log space.

use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        f64::NEG_INFINITY
    } else {
        ln_binomial(n, k)
    }
}

pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    if p == 0.0 || p == 1.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[if p == 0.0 { 0 } else { n as usize }] = 1.0;
        return v;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (0..=n)
        .map(|x| (ln_choose(n, x) + x as f64 * lp + (n - x) as f64 * lq).exp())
        .collect()
}

/// Pr(X = x) for X the number of marked items when drawing `n` from `mu`
/// items of which `m` are marked.
pub fn hypergeometric_pmf(mu: u64, m: u64, n: u64) -> Vec<f64> {
    let denom = ln_choose(mu, n);
    (0..=n.min(m))
        .map(|x| {
            if n - x > mu - m {
                0.0
            } else {
                (ln_choose(m, x) + ln_choose(mu - m, n - x) - denom).exp()
            }
        })
        .collect()
}

pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn tail(dist: &[f64], theta: u64) -> f64 {
    dist.iter().skip(theta as usize).sum::<f64>().min(1.0)
}

/// Distribution of the total number of misbehaving members when `n[i]`
/// members come from a class with adversarial rate `p[i]`.
pub fn misbehaving_distribution_weighted(n: &[u64], p: &[f64]) -> Result<Vec<f64>> {
    if n.len() != p.len() {
        return Err(Error::InvalidCounts(format!("{} class counts but {} rates", n.len(), p.len())));
    }
    p.iter().try_for_each(|&x| check_p(x))?;
    Ok(n.iter()
        .zip(p)
        .fold(vec![1.0], |acc, (&ni, &pi)| convolve(&acc, &binomial_pmf(ni, pi))))
}

/// Pr(at least `theta_l` members misbehave) under independent per-class sampling.
pub fn committee_failure_weighted(n: &[u64], p: &[f64], theta_l: u64) -> Result<f64> {
    let dist = misbehaving_distribution_weighted(n, p)?;
    let total: u64 = n.iter().sum();
    if theta_l > total {
        return Err(Error::InvalidCounts(format!("theta_l {theta_l} exceeds committee size {total}")));
    }
    Ok(tail(&dist, theta_l))
}

pub fn misbehaving_distribution_hypergeometric(mu: u64, m: &[u64], n: &[u64]) -> Result<Vec<f64>> {
    if m.len() != n.len() {
        return Err(Error::InvalidCounts(format!("{} marked counts but {} draws", m.len(), n.len())));
    }
    for (&mi, &ni) in m.iter().zip(n) {
        if mi > mu || ni > mu {
            return Err(Error::InvalidCounts(format!("class of {mu} cannot hold M={mi}, n={ni}")));
        }
    }
    Ok(m.iter()
        .zip(n)
        .fold(vec![1.0], |acc, (&mi, &ni)| convolve(&acc, &hypergeometric_pmf(mu, mi, ni))))
}

/// Same tail as [`committee_failure_weighted`], sampling each class of
/// size `mu` without replacement; `m[i]` of its members misbehave.
pub fn committee_failure_exact_hypergeometric(mu: u64, m: &[u64], n: &[u64], theta_l: u64) -> Result<f64> {
    let dist = misbehaving_distribution_hypergeometric(mu, m, n)?;
    let total: u64 = n.iter().sum();
    if theta_l > total {
        return Err(Error::InvalidCounts(format!("theta_l {theta_l} exceeds committee size {total}")));
    }
    Ok(tail(&dist, theta_l))
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == f64::NEG_INFINITY {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            if y != f64::NEG_INFINITY {
                out[i + j] = log_sum_exp(out[i + j], x + y);
            }
        }
    }
    out
}

/// ln of the coefficients of (sum_{j=theta}^{s} C(s, j) y^j)^(k+1).
pub fn ln_psi_coefficients(s_c: u64, kappa: u64, theta_l: u64) -> Vec<f64> {
    let base: Vec<f64> = (0..=s_c)
        .map(|j| if j >= theta_l { ln_choose(s_c, j) } else { f64::NEG_INFINITY })
        .collect();
    let mut acc = base.clone();
    for _ in 0..kappa {
        acc = log_poly_mul(&acc, &base);
    }
    acc
}

/// Probability that the primary and all `kappa` backup committees of size
/// `s_c` fail, when the (kappa+1)*s_c members are drawn without replacement
/// from `n` miners of which `m` misbehave.
pub fn autorecovery_failure(n: u64, m: u64, s_c: u64, kappa: u64, theta_l: u64) -> Result<f64> {
    let pool = (kappa + 1) * s_c;
    if pool > n || m > n || theta_l > s_c || s_c == 0 {
        return Err(Error::InvalidCounts(format!(
            "need (kappa+1)*S_c <= N, M <= N, theta_l <= S_c (N={n}, M={m}, S_c={s_c}, kappa={kappa}, theta_l={theta_l})"
        )));
    }
    if theta_l == 0 {
        return Ok(1.0);
    }
    let psi = ln_psi_coefficients(s_c, kappa, theta_l);
    let hyp_denom = ln_choose(n, pool);
    let mut total = 0.0;
    for i in ((kappa + 1) * theta_l)..=pool.min(m) {
        if pool - i > n - m {
            continue;
        }
        let ln_h = ln_choose(m, i) + ln_choose(n - m, pool - i) - hyp_denom;
        let ln_spread = psi[i as usize] - ln_choose(pool, i);
        total += (ln_h + ln_spread).exp();
    }
    Ok(total.min(1.0))
}

/// Union bound over `k` sidechains.
pub fn chainscale_autorecovery_bound(k: u64, per_sidechain: f64) -> f64 {
    (k as f64 * per_sidechain).min(1.0)
}

/// Per-class committee counts (in input class order) meeting `target`.
///
/// Starts from a balanced split and moves one seat at a time from the
/// highest-rate class to the lowest-rate class with room, stopping at the
/// first composition whose failure is at most `target`.
pub fn derive_quotas(classes: &[(f64, u64)], s_c: u64, target: f64, theta_l: u64) -> Result<Vec<u64>> {
    if classes.is_empty() {
        return Err(Error::InvalidCounts("no classes".into()));
    }
    classes.iter().try_for_each(|&(p, _)| check_p(p))?;
    check_p(target)?;
    let capacity: u64 = classes.iter().map(|c| c.1).sum();
    if capacity < s_c {
        return Err(Error::InvalidCounts(format!("classes hold {capacity} miners, committee needs {s_c}")));
    }
    let rates: Vec<f64> = classes.iter().map(|c| c.0).collect();
    let fail = |n: &[u64]| committee_failure_weighted(n, &rates, theta_l);

    // classes from safest to riskiest, ties by input order
    let mut by_p: Vec<usize> = (0..classes.len()).collect();
    by_p.sort_by(|&a, &b| classes[a].0.total_cmp(&classes[b].0).then(a.cmp(&b)));

    let mut best = vec![0u64; classes.len()];
    let mut left = s_c;
    for &c in &by_p {
        let take = left.min(classes[c].1);
        best[c] = take;
        left -= take;
    }
    let best_fail = fail(&best)?;
    if best_fail > target {
        return Err(Error::Infeasible { target, best: best_fail });
    }

    let k = classes.len() as u64;
    let mut start = vec![0u64; classes.len()];
    let mut left = s_c;
    for (rank, &c) in by_p.iter().enumerate() {
        let want = s_c / k + u64::from((rank as u64) < s_c % k);
        let take = want.min(classes[c].1).min(left);
        start[c] = take;
        left -= take;
    }
    for &c in &by_p {
        let take = left.min(classes[c].1 - start[c]);
        start[c] += take;
        left -= take;
    }

    let mut moves = Vec::new();
    let mut cur = start.clone();
    loop {
        let receiver = by_p.iter().copied().find(|&c| cur[c] < classes[c].1);
        let donor = by_p.iter().rev().copied().find(|&c| cur[c] > 0);
        match (receiver, donor) {
            (Some(r), Some(d)) if classes[d].0 > classes[r].0 => {
                cur[d] -= 1;
                cur[r] += 1;
                moves.push((d, r));
            }
            _ => break,
        }
    }
    let at = |t: usize| {
        let mut n = start.clone();
        for &(d, r) in &moves[..t] {
            n[d] -= 1;
            n[r] += 1;
        }
        n
    };
    // failure is nonincreasing along the path
    let (mut lo, mut hi) = (0usize, moves.len());
    if fail(&at(0))? <= target {
        return Ok(start);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fail(&at(mid))? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(at(hi))
}

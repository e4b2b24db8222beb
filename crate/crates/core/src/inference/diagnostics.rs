//! Split-chain R̂ and rank-normalized bulk ESS.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::InferenceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub ess_bulk: f64,
}

fn check_shape(chains: &[Vec<f64>]) -> Result<usize, InferenceError> {
    if chains.len() < 2 {
        return Err(InferenceError::TooFewDraws(format!("{} chain(s); need at least 2", chains.len())));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(InferenceError::TooFewDraws("chains have unequal length".into()));
    }
    if n < 4 {
        return Err(InferenceError::TooFewDraws(format!("{n} draws per chain")));
    }
    Ok(n)
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    chains
        .iter()
        .flat_map(|c| {
            let (a, b) = c.split_at(c.len() - half);
            // with an odd length the first half keeps the extra draw; drop it
            [a[a.len() - half..].to_vec(), b.to_vec()]
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic split-chain potential scale reduction on the raw draws. Chains with
/// zero within-chain variance yield `+∞`.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, InferenceError> {
    check_shape(chains)?;
    let halves = split(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = mean(&halves.iter().map(|c| var(c)).collect::<Vec<_>>());
    if !(w > 0.0) || !w.is_finite() {
        return Ok(f64::INFINITY);
    }
    let b_over_n = var(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Bulk effective sample size: rank-normalize the pooled split chains and
/// apply Geyer's initial monotone sequence estimator. Returns NaN for
/// constant input.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64, InferenceError> {
    check_shape(chains)?;
    let halves = split(chains);
    Ok(ess_raw(&rank_normalize(&halves)))
}

/// Pooled fractional ranks mapped through the standard normal quantile.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_per = chains[0].len();
    let total = chains.len() * n_per;
    let mut idx: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        // average rank for ties, 1-based
        let r = (i + j) as f64 / 2.0 + 1.0;
        for item in &idx[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let s = total as f64;
    ranks
        .chunks(n_per)
        .map(|c| c.iter().map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25))).collect())
        .collect()
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (x[i] - m) * (x[i + lag] - m);
    }
    s / n as f64
}

/// Multi-chain ESS without splitting or rank-normalization.
pub fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += var(&means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return f64::NAN;
    }
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let mut rho = vec![0.0; n];
    let mut rho_even = 1.0;
    rho[0] = rho_even;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov(s + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 && max_s + 1 < n {
        rho[max_s + 1] = rho_even;
    }
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_s + 1 < n { rho[max_s + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + tail;
    (total / tau).min(total * total.log10())
}

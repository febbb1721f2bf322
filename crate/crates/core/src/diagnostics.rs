//! Convergence diagnostics: rank-normalised split R-hat and effective sample size.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::SamplerError;
use crate::linalg::{mean, sample_variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub mean: f64,
    pub sd: f64,
    /// `None` when undefined (a single chain or a constant parameter).
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    /// Monte Carlo standard error of the mean, from the unranked split ESS.
    pub mcse_mean: Option<f64>,
}

/// Splits every chain in two halves, dropping the middle draw of odd chains.
fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    chains.iter().any(|c| c.iter().all(|v| *v == c[0]))
}

/// Normal scores of pooled average ranks, `Phi^-1((r - 3/8) / (S + 1/4))`.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut idx: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ci, c) in chains.iter().enumerate() {
        for (k, v) in c.iter().enumerate() {
            idx.push((*v, ci, k));
        }
    }
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let norm = Normal::new(0.0, 1.0).expect("standard normal");
    let s = total as f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = norm.inverse_cdf((rank - 0.375) / (s + 0.25));
        for t in &idx[i..=j] {
            out[t.1][t.2] = z;
        }
        i = j + 1;
    }
    out
}

fn rhat_raw(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    let var_hat = (n - 1.0) / n * w + b / n;
    (var_hat / w).sqrt()
}

/// Autocovariance at `lag` (biased, divided by n).
fn autocov(c: &[f64], m: f64, lag: usize) -> f64 {
    let n = c.len();
    let mut acc = 0.0;
    for t in 0..n - lag {
        acc += (c[t] - m) * (c[t + lag] - m);
    }
    acc / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence truncation.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 { chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, lag)).sum::<f64>() / m as f64 };
    let acov0 = acov(0);
    let nf = n as f64;
    let mean_var = acov0 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_variance(&means);
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = if n > 1 { rho(1) } else { 0.0 };
    if n > 1 {
        rho_hat[1] = rho_odd;
    }
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho(t + 1);
        rho_odd = rho(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho_hat[t + 1] = rho_even;
            rho_hat[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho_hat[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    total / tau
}

fn check_lengths(chains: &[&[f64]]) -> Result<usize, SamplerError> {
    let n = chains.first().map(|c| c.len()).unwrap_or(0);
    if chains.iter().any(|c| c.len() != n) || n / 2 < 4 {
        return Err(SamplerError::InsufficientDraws(n / 2));
    }
    Ok(n)
}

/// Rank-normalised split R-hat, the larger of the bulk and folded (tail) values.
pub fn split_rhat(chains: &[&[f64]]) -> Result<Option<f64>, SamplerError> {
    check_lengths(chains)?;
    if chains.len() < 2 {
        return Ok(None);
    }
    let s = split(chains);
    if is_constant(&s) {
        return Ok(None);
    }
    let bulk = rhat_raw(&rank_normalize(&s));
    let pooled: Vec<f64> = s.iter().flatten().copied().collect();
    let med = crate::linalg::quantile(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = if is_constant(&folded) { bulk } else { rhat_raw(&rank_normalize(&folded)) };
    let r = bulk.max(tail);
    Ok(r.is_finite().then_some(r))
}

/// Bulk effective sample size (rank-normalised split chains).
pub fn ess_bulk(chains: &[&[f64]]) -> Result<Option<f64>, SamplerError> {
    check_lengths(chains)?;
    let s = split(chains);
    if is_constant(&s) {
        return Ok(None);
    }
    let e = ess_raw(&rank_normalize(&s));
    Ok(e.is_finite().then_some(e))
}

/// Split-chain ESS on the raw draws, used for Monte Carlo standard errors of means.
pub fn ess_mean(chains: &[&[f64]]) -> Result<Option<f64>, SamplerError> {
    check_lengths(chains)?;
    let s = split(chains);
    if is_constant(&s) {
        return Ok(None);
    }
    let e = ess_raw(&s);
    Ok(e.is_finite().then_some(e))
}

pub fn summarize(chains: &[&[f64]]) -> Result<ParamDiagnostics, SamplerError> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let mu = mean(&pooled);
    let sd = sample_variance(&pooled).sqrt();
    let rhat = split_rhat(chains)?;
    let ess_bulk = ess_bulk(chains)?;
    let mcse_mean = ess_mean(chains)?.map(|e| sd / e.sqrt());
    Ok(ParamDiagnostics { mean: mu, sd, rhat, ess_bulk, mcse_mean })
}

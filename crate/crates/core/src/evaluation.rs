//! Predictive model assessment: WAIC, PSIS-LOO, paired comparison and
//! posterior predictive prevalence checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{inverse_logit, linear_predictor};
use crate::config::EpsilonMode;
use crate::error::EvalError;
use crate::linalg::{log_sum_exp, mean, pairwise_sum, sample_variance};
use crate::model::PosteriorTarget;

/// Draws by points, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix {
    draws: usize,
    points: usize,
    data: Vec<f64>,
}

impl LogLikMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let draws = rows.len();
        if draws < 2 {
            return Err(EvalError::DegenerateDraws);
        }
        let points = rows[0].len();
        if points == 0 || rows.iter().any(|r| r.len() != points) {
            return Err(EvalError::MismatchedPoints);
        }
        let mut data = Vec::with_capacity(draws * points);
        for (s, r) in rows.iter().enumerate() {
            if let Some(i) = r.iter().position(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite { draw: s, point: i });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { draws, points, data })
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.draws).map(|s| self.data[s * self.points + i]).collect()
    }
}

/// Expected log predictive density, in total and per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElpdReport {
    pub criterion: String,
    pub elpd: f64,
    pub p_eff: f64,
    pub se: f64,
    /// `-2 elpd` and its standard error.
    pub ic: f64,
    pub ic_se: f64,
    pub per_point: Vec<f64>,
    pub p_point: Vec<f64>,
    pub pareto_k: Option<Vec<f64>>,
    pub k_above_0_5: usize,
    pub k_above_0_7: usize,
    pub method: String,
}

fn lppd(col: &[f64]) -> f64 {
    log_sum_exp(col) - (col.len() as f64).ln()
}

fn report(criterion: &str, method: &str, per_point: Vec<f64>, p_point: Vec<f64>, k: Option<Vec<f64>>) -> ElpdReport {
    let n = per_point.len() as f64;
    let elpd = pairwise_sum(&per_point);
    let se = (n * sample_variance(&per_point)).sqrt();
    let (k5, k7) = match &k {
        Some(k) => (k.iter().filter(|v| **v > 0.5).count(), k.iter().filter(|v| **v > 0.7).count()),
        None => (0, 0),
    };
    ElpdReport {
        criterion: criterion.into(),
        elpd,
        p_eff: pairwise_sum(&p_point),
        se,
        ic: -2.0 * elpd,
        ic_se: 2.0 * se,
        per_point,
        p_point,
        pareto_k: k,
        k_above_0_5: k5,
        k_above_0_7: k7,
        method: method.into(),
    }
}

pub fn waic(ll: &LogLikMatrix) -> Result<ElpdReport, EvalError> {
    if ll.draws < 2 {
        return Err(EvalError::DegenerateDraws);
    }
    let (per_point, p_point): (Vec<f64>, Vec<f64>) = (0..ll.points)
        .into_par_iter()
        .map(|i| {
            let col = ll.column(i);
            let p = sample_variance(&col);
            (lppd(&col) - p, p)
        })
        .unzip();
    Ok(report("waic", "lppd minus posterior variance of the pointwise log-likelihood", per_point, p_point, None))
}

/// Generalised Pareto fit by the Zhang-Stephens empirical Bayes estimator
/// with the weakly informative shape adjustment. `x` must be sorted ascending
/// and non-negative. Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let m = 30 + (nf.sqrt().floor() as usize);
    let xstar = x[((nf / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let xmax = x[n - 1];
    let theta: Vec<f64> =
        (1..=m).map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar).collect();
    let l_theta: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = mean(&x.iter().map(|v| (a * v).ln_1p()).collect::<Vec<_>>());
            nf * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&l_theta);
    let theta_hat: f64 = theta.iter().zip(&l_theta).map(|(t, l)| t * (l - lse).exp()).sum();
    let mut k = mean(&x.iter().map(|v| (-theta_hat * v).ln_1p()).collect::<Vec<_>>());
    let sigma = -k / theta_hat;
    let a = 10.0;
    k = k * nf / (nf + a) + a * 0.5 / (nf + a);
    if sigma.is_nan() {
        return (f64::INFINITY, f64::NAN);
    }
    (k, sigma)
}

/// Generalised Pareto quantile function.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k == 0.0 {
        return -sigma * (-p).ln_1p();
    }
    sigma * (-k * (-p).ln_1p()).exp_m1() / k
}

/// Pareto-smoothed log weights for one point's log ratios (not normalised),
/// and the fitted shape. Constant tails report `k = 0`.
pub fn psis_smooth(log_ratios: &[f64]) -> Result<(Vec<f64>, f64), EvalError> {
    let s = log_ratios.len();
    let sf = s as f64;
    let tail = ((0.2 * sf).ceil() as usize).min((3.0 * sf.sqrt()).ceil() as usize);
    if tail < 5 || tail >= s {
        return Err(EvalError::TailTooSmall { tail });
    }
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|a, b| lw[*a].total_cmp(&lw[*b]));
    let tail_ids = &order[s - tail..];
    let tail_vals: Vec<f64> = tail_ids.iter().map(|&i| lw[i]).collect();
    let mut khat = 0.0;
    if (tail_vals[tail - 1] - tail_vals[0]).abs() >= f64::EPSILON / 100.0 {
        let cutoff = lw[order[s - tail - 1]];
        let exp_cut = cutoff.exp();
        let x: Vec<f64> = tail_vals.iter().map(|v| v.exp() - exp_cut).collect();
        let (k, sigma) = gpd_fit(&x);
        khat = k;
        if k.is_finite() {
            for (rank, &i) in tail_ids.iter().enumerate() {
                let p = (rank as f64 + 0.5) / tail as f64;
                lw[i] = (gpd_quantile(p, k, sigma) + exp_cut).ln();
            }
        }
    }
    // never above the largest raw weight
    for v in lw.iter_mut() {
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    // truncate at S^(3/4) times the mean weight
    let log_mean = log_sum_exp(&lw) - sf.ln();
    let cap = 0.75 * sf.ln() + log_mean;
    for v in lw.iter_mut() {
        if *v > cap {
            *v = cap;
        }
    }
    Ok((lw.into_iter().map(|v| v + max).collect(), khat))
}

pub fn psis_loo(ll: &LogLikMatrix) -> Result<ElpdReport, EvalError> {
    let rows: Vec<Result<(f64, f64, f64), EvalError>> = (0..ll.points)
        .into_par_iter()
        .map(|i| {
            let col = ll.column(i);
            let ratios: Vec<f64> = col.iter().map(|v| -v).collect();
            let (lw, k) = psis_smooth(&ratios)?;
            let num: Vec<f64> = lw.iter().zip(&col).map(|(w, l)| w + l).collect();
            let elpd_i = log_sum_exp(&num) - log_sum_exp(&lw);
            Ok((elpd_i, lppd(&col) - elpd_i, k))
        })
        .collect();
    let mut per_point = Vec::with_capacity(ll.points);
    let mut p_point = Vec::with_capacity(ll.points);
    let mut ks = Vec::with_capacity(ll.points);
    for r in rows {
        let (e, p, k) = r?;
        per_point.push(e);
        p_point.push(p);
        ks.push(k);
    }
    Ok(report(
        "psis-loo",
        "Pareto-smoothed importance sampling; generalised Pareto tail fit by Zhang-Stephens empirical Bayes \
         (grid 30 + floor(sqrt(M)), prior 3, shape shrunk towards 0.5 with weight 10); \
         tail M = min(ceil(0.2 S), ceil(3 sqrt(S))); weights truncated at S^(3/4) mean",
        per_point,
        p_point,
        Some(ks),
    ))
}

/// `(sum(a - b), sqrt(N var(a - b)))` over matched points.
pub fn paired_difference(a: &ElpdReport, b: &ElpdReport) -> Result<(f64, f64), EvalError> {
    if a.per_point.len() != b.per_point.len() {
        return Err(EvalError::MismatchedPoints);
    }
    let d: Vec<f64> = a.per_point.iter().zip(&b.per_point).map(|(x, y)| x - y).collect();
    Ok((pairwise_sum(&d), (d.len() as f64 * sample_variance(&d)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub elpd: f64,
    pub se: f64,
    /// `elpd - elpd_best`, so never positive.
    pub elpd_diff: f64,
    pub se_diff: f64,
    pub ic: f64,
    /// `ic - ic_best`: positive means worse.
    pub ic_diff: f64,
    pub ic_se_diff: f64,
}

/// Rows sorted best first, differences taken against the best model.
pub fn compare(reports: &[(String, ElpdReport)]) -> Result<Vec<CompareRow>, EvalError> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    if reports.iter().any(|(_, r)| r.per_point.len() != first.1.per_point.len()) {
        return Err(EvalError::MismatchedPoints);
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|a, b| reports[*b].1.elpd.total_cmp(&reports[*a].1.elpd).then(a.cmp(b)));
    let best = &reports[order[0]].1;
    order
        .into_iter()
        .map(|i| {
            let (name, r) = &reports[i];
            let (d, se) = paired_difference(r, best)?;
            Ok(CompareRow {
                model: name.clone(),
                elpd: r.elpd,
                se: r.se,
                elpd_diff: d,
                se_diff: se,
                ic: r.ic,
                ic_diff: 0.0 - 2.0 * d,
                ic_se_diff: 2.0 * se,
            })
        })
        .collect()
}

/// Fraction of replicated statistics at or above the observed one, ties counted half.
pub fn bayes_p_value(replicated: &[f64], observed: f64) -> f64 {
    let mut above = 0.0;
    for &t in replicated {
        if t > observed {
            above += 1.0;
        } else if t == observed {
            above += 0.5;
        }
    }
    above / replicated.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceCheck {
    pub location: usize,
    pub disease: usize,
    pub respondents: usize,
    pub observed: f64,
    pub replicated_mean: f64,
    pub replicated_q05: f64,
    pub replicated_q95: f64,
    pub p_value: f64,
}

/// Per-(location, disease) prevalence replicated from the posterior predictive.
/// Each draw uses its own RNG stream so the result does not depend on scheduling.
pub fn posterior_predictive_prevalence(
    target: &PosteriorTarget,
    draws: &[Vec<f64>],
    epsilon: EpsilonMode,
    seed: u64,
) -> Result<Vec<PrevalenceCheck>, EvalError> {
    let dims = target.dims();
    let (nd, nl) = (dims.num_diseases, dims.num_locations);
    let records = target.records();
    let mut counts = vec![0usize; nl];
    let mut observed = vec![0.0; nl * nd];
    for r in records {
        counts[r.location] += 1;
        for j in 0..nd {
            observed[r.location * nd + j] += r.responses[j] as f64;
        }
    }
    if counts.iter().all(|c| *c == 0) {
        return Err(EvalError::EmptyGroup("all locations".into()));
    }
    let replicated: Vec<Vec<f64>> = draws
        .par_iter()
        .enumerate()
        .map(|(s, x)| {
            let fwd = target.forward(x).map_err(|_| EvalError::NonFinite { draw: s, point: 0 })?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut totals = vec![0.0; nl * nd];
            for (i, rec) in records.iter().enumerate() {
                let eps = match epsilon {
                    EpsilonMode::Prior => rng.sample(StandardNormal),
                    EpsilonMode::Posterior => fwd.state.epsilon[i],
                };
                let eta = linear_predictor(dims, &fwd.table, rec, &fwd.state.gamma, eps);
                for j in 0..nd {
                    if rng.random::<f64>() < inverse_logit(eta[j]) {
                        totals[rec.location * nd + j] += 1.0;
                    }
                }
            }
            Ok(totals)
        })
        .collect::<Result<_, EvalError>>()?;
    let mut out = Vec::new();
    for l in 0..nl {
        if counts[l] == 0 {
            continue;
        }
        let n = counts[l] as f64;
        for j in 0..nd {
            let obs = observed[l * nd + j] / n;
            let mut rep: Vec<f64> = replicated.iter().map(|t| t[l * nd + j] / n).collect();
            let p_value = bayes_p_value(&rep, obs);
            rep.sort_by(f64::total_cmp);
            out.push(PrevalenceCheck {
                location: l,
                disease: j,
                respondents: counts[l],
                observed: obs,
                replicated_mean: mean(&rep),
                replicated_q05: crate::linalg::quantile_sorted(&rep, 0.05),
                replicated_q95: crate::linalg::quantile_sorted(&rep, 0.95),
                p_value,
            });
        }
    }
    Ok(out)
}

//! Posterior summaries: comorbidity loadings, national effects, local odds
//! ratios, cohort-step odds ratios and morbidity curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{coefficient_at, inverse_logit};
use crate::config::Dynamics;
use crate::data::{build_design, RawCovariates, RAW_FIELDS};
use crate::error::{EvalError, ModelError};
use crate::linalg::{mean, quantile_sorted};
use crate::model::{Forward, PosteriorTarget};
use crate::params::ParamLayout;
use crate::priors;

/// Posterior mean, standard deviation and quantiles of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub q975: f64,
}

impl DrawSummary {
    pub fn from_draws(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p| quantile_sorted(&v, p);
        Self {
            mean: mean(&v),
            sd: crate::linalg::sample_variance(&v).sqrt(),
            q025: q(0.025),
            q05: q(0.05),
            q25: q(0.25),
            q50: q(0.5),
            q75: q(0.75),
            q95: q(0.95),
            q975: q(0.975),
        }
    }

    /// The central 95% interval excludes zero.
    pub fn excludes_zero(&self) -> bool {
        self.q025 > 0.0 || self.q975 < 0.0
    }
}

/// One long-format output row: grouping keys (blank when not applicable) and a summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub disease: Option<usize>,
    pub disease_b: Option<usize>,
    pub predictor: Option<String>,
    pub location: Option<usize>,
    pub cohort: Option<usize>,
    pub age: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub q975: f64,
    /// 95% interval excludes zero (bold entries of a coefficient table).
    pub bold: bool,
}

impl SummaryRow {
    pub fn new(quantity: &str, values: &[f64]) -> Self {
        let d = DrawSummary::from_draws(values);
        Self {
            quantity: quantity.into(),
            mean: d.mean,
            sd: d.sd,
            q025: d.q025,
            q05: d.q05,
            q25: d.q25,
            q50: d.q50,
            q75: d.q75,
            q95: d.q95,
            q975: d.q975,
            bold: d.excludes_zero(),
            ..Default::default()
        }
    }
}

/// Names of the quantities invariant to the sign and order of the mean factors:
/// `B0`, the loadings `gamma`, the scales and the kernel parameters.
pub fn identified_names(layout: &ParamLayout) -> Vec<String> {
    let d = &layout.dims;
    let (nd, np) = (d.num_diseases, d.num_predictors);
    let mut out: Vec<String> = (0..nd).flat_map(|j| (0..np).map(move |h| format!("b0[{j},{h}]"))).collect();
    out.extend((0..nd).map(|j| format!("gamma[{j}]")));
    for (name, present) in [("lambda0", layout.log_lambda0_sq.is_some()), ("lambda1", layout.log_lambda1_sq.is_some())] {
        if present {
            out.extend((0..nd).flat_map(|j| (0..np).map(move |h| format!("{name}[{j},{h}]"))));
        }
    }
    if layout.logit_theta_region.is_some() {
        out.extend((0..d.num_regions).map(|r| format!("theta_region[{r}]")));
    }
    if layout.logit_theta_contiguity.is_some() {
        out.push("theta_contiguity".into());
    }
    if layout.alr_omega.is_some() {
        for set in 0..d.omega_sets {
            for j in 0..nd {
                out.extend((0..d.num_kernels()).map(|m| format!("omega[{set},{j},{m}]")));
            }
        }
    }
    out
}

/// Values matching [`identified_names`] for one unconstrained draw.
pub fn identified_values(layout: &ParamLayout, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let s = priors::from_unconstrained(layout, x)?;
    let mut out = s.b0(&layout.dims);
    out.extend_from_slice(&s.gamma);
    if layout.log_lambda0_sq.is_some() {
        out.extend_from_slice(&s.lambda0);
    }
    if layout.log_lambda1_sq.is_some() {
        out.extend_from_slice(&s.lambda1);
    }
    if layout.logit_theta_region.is_some() {
        out.extend_from_slice(&s.theta_region);
    }
    if layout.logit_theta_contiguity.is_some() {
        out.push(s.theta_contiguity);
    }
    if layout.alr_omega.is_some() {
        for w in &s.omega {
            out.extend_from_slice(w);
        }
    }
    Ok(out)
}

/// Runs the forward pass for every draw and keeps what `f` extracts.
pub fn map_draws<T: Send>(
    target: &PosteriorTarget,
    draws: &[Vec<f64>],
    f: impl Fn(&Forward) -> T + Sync,
) -> Result<Vec<T>, EvalError> {
    draws
        .par_iter()
        .enumerate()
        .map(|(s, x)| target.forward(x).map(|fwd| f(&fwd)).map_err(|_| EvalError::NonFinite { draw: s, point: 0 }))
        .collect()
}

/// All entries of `gamma gamma^T`, so the table is symmetric.
pub fn comorbidity(target: &PosteriorTarget, draws: &[Vec<f64>]) -> Result<Vec<SummaryRow>, EvalError> {
    let gammas = map_draws(target, draws, |f| f.state.gamma.clone())?;
    let nd = target.dims().num_diseases;
    let mut out = Vec::new();
    for a in 0..nd {
        for b in 0..nd {
            let v: Vec<f64> = gammas.iter().map(|g| g[a] * g[b]).collect();
            out.push(SummaryRow { disease: Some(a), disease_b: Some(b), ..SummaryRow::new("gamma_outer", &v) });
        }
    }
    Ok(out)
}

/// National effects `B0` with the bold flag set when the 95% interval excludes zero.
pub fn national_effects(target: &PosteriorTarget, draws: &[Vec<f64>]) -> Result<Vec<SummaryRow>, EvalError> {
    let b0s = map_draws(target, draws, |f| f.b0.clone())?;
    let np = target.dims().num_predictors;
    let names: Vec<&str> = target.config().covariates.iter().map(|c| c.name()).collect();
    let mut out = Vec::new();
    for j in 0..target.dims().num_diseases {
        for h in 0..np {
            let v: Vec<f64> = b0s.iter().map(|b| b[j * np + h]).collect();
            out.push(SummaryRow { disease: Some(j), predictor: Some(names[h].to_string()), ..SummaryRow::new("b0", &v) });
        }
    }
    Ok(out)
}

/// Kernel parameters: region and contiguity correlations and mixture weights.
pub fn kernel_parameters(target: &PosteriorTarget, draws: &[Vec<f64>]) -> Result<Vec<SummaryRow>, EvalError> {
    let lay = target.layout();
    let states = map_draws(target, draws, |f| f.state.clone())?;
    let mut out = Vec::new();
    if lay.logit_theta_region.is_some() {
        for r in 0..target.dims().num_regions {
            let v: Vec<f64> = states.iter().map(|s| s.theta_region[r]).collect();
            out.push(SummaryRow { location: None, cohort: None, predictor: Some(format!("region{r}")), ..SummaryRow::new("theta_region", &v) });
        }
    }
    if lay.logit_theta_contiguity.is_some() {
        let v: Vec<f64> = states.iter().map(|s| s.theta_contiguity).collect();
        out.push(SummaryRow::new("theta_contiguity", &v));
    }
    if lay.alr_omega.is_some() {
        let nd = target.dims().num_diseases;
        for (slot, _) in states[0].omega.iter().enumerate() {
            for (m, spec) in target.dims().kernels.iter().enumerate() {
                let v: Vec<f64> = states.iter().map(|s| s.omega[slot][m]).collect();
                out.push(SummaryRow {
                    disease: Some(slot % nd),
                    cohort: Some(slot / nd),
                    predictor: Some(spec.to_string()),
                    ..SummaryRow::new("omega", &v)
                });
            }
        }
    }
    Ok(out)
}

fn check_indices(target: &PosteriorTarget, j: usize, h: usize, c: usize) -> Result<(), EvalError> {
    let d = target.dims();
    if j >= d.num_diseases || h >= d.num_predictors || c >= d.num_cohorts {
        return Err(EvalError::InvalidQuery(format!("disease {j}, predictor {h}, cohort {c} out of range")));
    }
    Ok(())
}

/// `exp(beta_jh(l, c))` per location.
pub fn local_odds_ratios(
    target: &PosteriorTarget,
    draws: &[Vec<f64>],
    j: usize,
    h: usize,
    c: usize,
) -> Result<Vec<SummaryRow>, EvalError> {
    check_indices(target, j, h, c)?;
    let dims = target.dims().clone();
    let nl = dims.num_locations;
    let per_draw = map_draws(target, draws, |f| {
        (0..nl).map(|l| coefficient_at(&dims, &f.b0, &f.deviations, j, h, l, c).exp()).collect::<Vec<f64>>()
    })?;
    let name = target.config().covariates[h].name().to_string();
    Ok((0..nl)
        .map(|l| {
            let v: Vec<f64> = per_draw.iter().map(|d| d[l]).collect();
            SummaryRow {
                disease: Some(j),
                predictor: Some(name.clone()),
                location: Some(l),
                cohort: Some(c),
                ..SummaryRow::new("odds_ratio", &v)
            }
        })
        .collect())
}

/// Odds ratio between consecutive cohorts, `exp(beta(l, c + 1) - beta(l, c))`.
/// Under linear dynamics this is the same for every `c`, so only `c = 0` is reported.
pub fn cohort_step_odds_ratios(
    target: &PosteriorTarget,
    draws: &[Vec<f64>],
    j: usize,
    h: usize,
) -> Result<Vec<SummaryRow>, EvalError> {
    check_indices(target, j, h, 0)?;
    let dims = target.dims().clone();
    let nl = dims.num_locations;
    let steps = match dims.dynamics {
        Dynamics::Linear => 1,
        Dynamics::RandomWalk => dims.num_cohorts.saturating_sub(1),
    };
    let per_draw = map_draws(target, draws, |f| {
        let mut v = Vec::with_capacity(nl * steps);
        for l in 0..nl {
            for c in 0..steps {
                let a = coefficient_at(&dims, &f.b0, &f.deviations, j, h, l, c);
                let b = coefficient_at(&dims, &f.b0, &f.deviations, j, h, l, c + 1);
                v.push((b - a).exp());
            }
        }
        v
    })?;
    let name = target.config().covariates[h].name().to_string();
    let mut out = Vec::new();
    for l in 0..nl {
        for c in 0..steps {
            let v: Vec<f64> = per_draw.iter().map(|d| d[l * steps + c]).collect();
            out.push(SummaryRow {
                disease: Some(j),
                predictor: Some(name.clone()),
                location: Some(l),
                cohort: Some(c),
                ..SummaryRow::new("cohort_odds_ratio", &v)
            });
        }
    }
    Ok(out)
}

/// Parses `field=value` pairs into raw covariates. Age is supplied by the curve grid.
pub fn parse_profile(pairs: &[(String, String)]) -> Result<RawCovariates, EvalError> {
    let mut raw = RawCovariates::default();
    for (k, v) in pairs {
        let flag = || -> Result<Option<u8>, EvalError> {
            match v.trim() {
                "0" => Ok(Some(0)),
                "1" => Ok(Some(1)),
                _ => Err(EvalError::InvalidQuery(format!("{k}={v} is not 0 or 1"))),
            }
        };
        match k.trim() {
            "sex" => raw.sex = flag()?,
            "edu" => raw.edu = flag()?,
            "eco" => raw.eco = flag()?,
            "smoke" => raw.smoke = flag()?,
            other => {
                let known = RAW_FIELDS.contains(&other);
                return Err(EvalError::UnknownProfileField(if known {
                    format!("{other} (set by the age grid)")
                } else {
                    other.to_string()
                }));
            }
        }
    }
    Ok(raw)
}

/// Probability of diagnosis against age for one profile, with the individual latent at zero.
pub fn morbidity_curves(
    target: &PosteriorTarget,
    draws: &[Vec<f64>],
    profile: &RawCovariates,
    disease: usize,
    locations: &[usize],
    cohorts: &[usize],
    ages: &[f64],
) -> Result<Vec<SummaryRow>, EvalError> {
    let dims = target.dims().clone();
    check_indices(target, disease, 0, 0)?;
    if let Some(&l) = locations.iter().find(|l| **l >= dims.num_locations) {
        return Err(EvalError::InvalidQuery(format!("location {l} out of range")));
    }
    if let Some(&c) = cohorts.iter().find(|c| **c >= dims.num_cohorts) {
        return Err(EvalError::InvalidQuery(format!("cohort {c} out of range")));
    }
    let mut designs = Vec::with_capacity(ages.len());
    for &a in ages {
        let raw = RawCovariates { age: Some(a), ..*profile };
        let x = build_design(&raw, target.config()).map_err(|e| EvalError::InvalidQuery(format!("profile: {e}")))?;
        designs.push(x);
    }
    let np = dims.num_predictors;
    let cells: Vec<(usize, usize)> = locations.iter().flat_map(|&l| cohorts.iter().map(move |&c| (l, c))).collect();
    let per_draw = map_draws(target, draws, |f| {
        let mut v = Vec::with_capacity(cells.len() * designs.len());
        for &(l, c) in &cells {
            let beta: Vec<f64> =
                (0..np).map(|h| coefficient_at(&dims, &f.b0, &f.deviations, disease, h, l, c)).collect();
            for x in &designs {
                v.push(inverse_logit(beta.iter().zip(x).map(|(b, x)| b * x).sum()));
            }
        }
        v
    })?;
    let mut out = Vec::new();
    for (ci, &(l, c)) in cells.iter().enumerate() {
        for (ai, &age) in ages.iter().enumerate() {
            let k = ci * ages.len() + ai;
            let v: Vec<f64> = per_draw.iter().map(|d| d[k]).collect();
            out.push(SummaryRow {
                disease: Some(disease),
                location: Some(l),
                cohort: Some(c),
                age: Some(age),
                ..SummaryRow::new("morbidity", &v)
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelVariant;
    use crate::model::tests::toy_target;
    use crate::priors::to_unconstrained;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn fixed_gamma_gives_exact_product() {
        let t = toy_target(ModelVariant::Fe, Dynamics::Linear, 5, 1);
        let mut s = crate::params::ParameterState::neutral(t.dims());
        s.gamma = vec![1.0, 2.0];
        let x = to_unconstrained(t.layout(), &s);
        let rows = comorbidity(&t, &vec![x; 10]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!((rows[1].mean - 2.0).abs() < 1e-12 && (rows[1].q025 - 2.0).abs() < 1e-12);
        assert_eq!(rows[1].mean, rows[2].mean);
        assert_eq!((rows[2].disease, rows[2].disease_b), (Some(1), Some(0)));
    }

    fn random_draws(t: &PosteriorTarget, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        (0..n).map(|_| (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn fixed_effects_odds_ratios_are_flat() {
        let t = toy_target(ModelVariant::Fe, Dynamics::Linear, 5, 1);
        let draws = random_draws(&t, 20);
        let rows = local_odds_ratios(&t, &draws, 1, 1, 2).unwrap();
        assert!(rows.iter().all(|r| r.mean == rows[0].mean && r.q95 == rows[0].q95));
        let steps = cohort_step_odds_ratios(&t, &draws, 0, 0).unwrap();
        assert!(steps.iter().all(|r| (r.mean - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cohort_step_is_one_without_shift_scale() {
        let t = toy_target(ModelVariant::FullSt, Dynamics::Linear, 5, 1);
        let mut draws = random_draws(&t, 10);
        let r = t.layout().log_lambda1_sq.clone().unwrap();
        for d in draws.iter_mut() {
            d[r.clone()].iter_mut().for_each(|v| *v = -1500.0);
        }
        let steps = cohort_step_odds_ratios(&t, &draws, 1, 2).unwrap();
        assert_eq!(steps.len(), 4);
        assert!(steps.iter().all(|r| r.mean == 1.0));
        let varied = cohort_step_odds_ratios(&t, &random_draws(&t, 10), 1, 2).unwrap();
        assert!(varied.iter().any(|r| r.mean != 1.0));
    }

    #[test]
    fn national_effects_flag_and_profiles() {
        let t = toy_target(ModelVariant::Fe, Dynamics::Linear, 5, 1);
        let mut s = crate::params::ParameterState::neutral(t.dims());
        s.phi = vec![1.0, 0.0, 0.0, 1.0];
        s.psi = vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let x = to_unconstrained(t.layout(), &s);
        let rows = national_effects(&t, &vec![x.clone(); 4]).unwrap();
        assert!(rows[0].bold && rows[0].predictor.as_deref() == Some("intercept") && (rows[0].mean - 2.0).abs() < 1e-12);
        assert!(!rows[1].bold);

        let p = parse_profile(&[("sex".into(), "1".into())]).unwrap();
        assert_eq!(p.sex, Some(1));
        assert!(matches!(parse_profile(&[("height".into(), "2".into())]), Err(EvalError::UnknownProfileField(_))));
        let curves = morbidity_curves(&t, &[x], &p, 0, &[0, 3], &[1], &[51.0, 56.5, 62.0]).unwrap();
        assert_eq!(curves.len(), 6);
        // intercept 2 and nothing else: pi = logistic(2)
        assert!(curves.iter().all(|c| (c.mean - inverse_logit(2.0)).abs() < 1e-12));
    }

    #[test]
    fn identified_quantities_ignore_factor_sign() {
        let t = toy_target(ModelVariant::FullSt, Dynamics::Linear, 10, 3);
        let lay = t.layout();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut flipped = x.clone();
        let rank = lay.dims.rank();
        for j in 0..lay.dims.num_diseases {
            flipped[lay.phi.start + j * rank] *= -1.0;
        }
        for h in 0..lay.dims.num_predictors {
            flipped[lay.psi.start + h] *= -1.0;
        }
        let a = identified_values(lay, &x).unwrap();
        let b = identified_values(lay, &flipped).unwrap();
        assert_eq!(a.len(), identified_names(lay).len());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

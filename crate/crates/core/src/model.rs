//! Joint log-posterior over the unconstrained parameter vector, with an
//! analytic gradient obtained by a hand-written reverse pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::coefficients::{coefficient_table, inverse_logit, DeviationField};
use crate::config::{Dynamics, Hyperparameters, KernelSpec, ModelConfig, PointwiseUnit};
use crate::data::{LocationTable, RespondentRecord};
use crate::error::ModelError;
use crate::kernels::{
    contiguity_theta_adjoint, kernel_matrix, mixture_covariance, partition_theta_adjoint, KernelParams,
};
use crate::linalg::{cholesky_backward, log1p_exp, lower_t_mul_add, Matrix};
use crate::params::{Dims, ParamLayout, ParameterState};
use crate::priors;

/// Bernoulli-logit log mass of `y` given log-odds `eta`.
#[inline]
pub fn bernoulli_logit_lpmf(y: u8, eta: f64) -> f64 {
    if y == 1 {
        -log1p_exp(-eta)
    } else {
        -log1p_exp(eta)
    }
}

/// `sum_i sum_j log p(y_ij | eta_ij)` for a constrained state.
pub fn log_likelihood(dims: &Dims, records: &[RespondentRecord], state: &ParameterState, table: &[f64]) -> f64 {
    pointwise_loglik(dims, records, state, table, PointwiseUnit::Respondent).iter().sum()
}

/// Per-respondent (or per-observation) log-likelihood contributions.
pub fn pointwise_loglik(
    dims: &Dims,
    records: &[RespondentRecord],
    state: &ParameterState,
    table: &[f64],
    unit: PointwiseUnit,
) -> Vec<f64> {
    let nd = dims.num_diseases;
    let mut out = Vec::with_capacity(match unit {
        PointwiseUnit::Respondent => records.len(),
        PointwiseUnit::Observation => records.len() * nd,
    });
    for (i, rec) in records.iter().enumerate() {
        let eta = crate::coefficients::linear_predictor(dims, table, rec, &state.gamma, state.epsilon[i]);
        match unit {
            PointwiseUnit::Respondent => {
                out.push(eta.iter().zip(&rec.responses).map(|(e, y)| bernoulli_logit_lpmf(*y, *e)).sum())
            }
            PointwiseUnit::Observation => {
                out.extend(eta.iter().zip(&rec.responses).map(|(e, y)| bernoulli_logit_lpmf(*y, *e)))
            }
        }
    }
    out
}

/// Everything computed on the way from an unconstrained vector to the likelihood.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: ParameterState,
    pub b0: Vec<f64>,
    pub deviations: DeviationField,
    /// Coefficient table, see [`coefficient_table`].
    pub table: Vec<f64>,
    /// Active kernel matrices, in mixture order.
    pub kernels: Vec<Matrix>,
    /// Cholesky factors per `[set * n_d + j]`, when locations are correlated.
    pub factors: Option<Vec<Matrix>>,
    /// Jitter applied to each factorised mixture.
    pub jitter: Vec<f64>,
}

/// A full gradient evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub max_jitter: f64,
}

/// Dataset, locations and configuration bound into one posterior density.
#[derive(Debug)]
pub struct PosteriorTarget {
    layout: ParamLayout,
    config: ModelConfig,
    hyper: Hyperparameters,
    records: Vec<RespondentRecord>,
    locations: LocationTable,
    unit: PointwiseUnit,
    /// Parameter-free kernels (distance kernels) cached by mixture position.
    fixed_kernels: Vec<Option<Matrix>>,
    evaluations: AtomicU64,
    jitter_events: AtomicU64,
}

impl Clone for PosteriorTarget {
    fn clone(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            config: self.config.clone(),
            hyper: self.hyper.clone(),
            records: self.records.clone(),
            locations: self.locations.clone(),
            unit: self.unit,
            fixed_kernels: self.fixed_kernels.clone(),
            evaluations: AtomicU64::new(0),
            jitter_events: AtomicU64::new(0),
        }
    }
}

impl PosteriorTarget {
    pub fn new(
        config: &ModelConfig,
        hyper: &Hyperparameters,
        records: Vec<RespondentRecord>,
        locations: LocationTable,
        unit: PointwiseUnit,
    ) -> Result<Self, ModelError> {
        let dims = Dims::new(config, locations.num_locations(), locations.num_regions(), records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.responses.len() != dims.num_diseases {
                return Err(ModelError::Dimension { expected: dims.num_diseases, got: rec.responses.len() });
            }
            if rec.covariates.len() != dims.num_predictors {
                return Err(ModelError::Dimension { expected: dims.num_predictors, got: rec.covariates.len() });
            }
            if rec.location >= dims.num_locations || rec.cohort >= dims.num_cohorts {
                return Err(ModelError::ConstraintViolation(format!(
                    "record {i} refers to location {} cohort {} outside the configured range",
                    rec.location, rec.cohort
                )));
            }
        }
        let probe = KernelParams { theta_region: vec![0.5; locations.num_regions()], theta_contiguity: 0.5 };
        let mut fixed_kernels = Vec::with_capacity(dims.kernels.len());
        for spec in &dims.kernels {
            let k = kernel_matrix(*spec, &probe, &locations)?;
            fixed_kernels.push(matches!(spec, KernelSpec::Distance(_)).then_some(k));
        }
        Ok(Self {
            layout: ParamLayout::new(dims),
            config: config.clone(),
            hyper: hyper.clone(),
            records,
            locations,
            unit,
            fixed_kernels,
            evaluations: AtomicU64::new(0),
            jitter_events: AtomicU64::new(0),
        })
    }

    /// Reads `respondents.csv` and the location files from `data_dir`.
    pub fn load(config: &crate::config::RunConfig, data_dir: &std::path::Path) -> crate::Result<Self> {
        let locations = crate::data::load_location_dir(data_dir, config.model.num_distance_kernels())?;
        let records =
            crate::data::load_dataset(&data_dir.join("respondents.csv"), &config.model, locations.num_locations())?;
        Ok(Self::new(&config.model, &config.priors, records, locations, config.evaluation.pointwise)?)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dims(&self) -> &Dims {
        &self.layout.dims
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn records(&self) -> &[RespondentRecord] {
        &self.records
    }

    pub fn locations(&self) -> &LocationTable {
        &self.locations
    }

    pub fn pointwise_unit(&self) -> PointwiseUnit {
        self.unit
    }

    /// Number of log-density evaluations so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Number of evaluations in which some mixture needed diagonal jitter.
    pub fn jitter_events(&self) -> u64 {
        self.jitter_events.load(Ordering::Relaxed)
    }

    /// Length of the pointwise log-likelihood vector.
    pub fn num_pointwise(&self) -> usize {
        match self.unit {
            PointwiseUnit::Respondent => self.records.len(),
            PointwiseUnit::Observation => self.records.len() * self.layout.dims.num_diseases,
        }
    }

    fn kernel_params(&self, state: &ParameterState) -> KernelParams {
        KernelParams { theta_region: state.theta_region.clone(), theta_contiguity: state.theta_contiguity }
    }

    /// Deterministic forward pass from the unconstrained vector.
    pub fn forward(&self, x: &[f64]) -> Result<Forward, ModelError> {
        let state = priors::from_unconstrained(&self.layout, x)?;
        self.forward_state(state)
    }

    pub fn forward_state(&self, state: ParameterState) -> Result<Forward, ModelError> {
        let dims = &self.layout.dims;
        let b0 = state.b0(dims);
        let mut kernels = Vec::new();
        let mut factors = None;
        let mut jitter = Vec::new();
        if dims.mask.local && dims.mask.correlated && !dims.kernels.is_empty() {
            let params = self.kernel_params(&state);
            for (spec, fixed) in dims.kernels.iter().zip(&self.fixed_kernels) {
                kernels.push(match fixed {
                    Some(k) => k.clone(),
                    None => kernel_matrix(*spec, &params, &self.locations)?,
                });
            }
            let mut f = Vec::with_capacity(state.omega.len());
            for w in &state.omega {
                let cov = mixture_covariance(w, &kernels)?;
                jitter.push(cov.jitter_applied);
                f.push(cov.cholesky);
            }
            factors = Some(f);
        }
        let deviations = DeviationField::from_state(dims, &state, factors.as_deref());
        let table = coefficient_table(dims, &b0, &deviations);
        Ok(Forward { state, b0, deviations, table, kernels, factors, jitter })
    }

    pub fn log_likelihood(&self, fwd: &Forward) -> f64 {
        log_likelihood(&self.layout.dims, &self.records, &fwd.state, &fwd.table)
    }

    /// Pointwise log-likelihood at an unconstrained point, in the configured unit.
    pub fn pointwise(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let fwd = self.forward(x)?;
        Ok(pointwise_loglik(&self.layout.dims, &self.records, &fwd.state, &fwd.table, self.unit))
    }

    /// Log posterior value only.
    pub fn log_posterior_value(&self, x: &[f64]) -> Result<f64, ModelError> {
        let fwd = self.forward(x)?;
        let mut scratch = vec![0.0; x.len()];
        let lp = priors::log_prior_unconstrained_into(&self.layout, &self.hyper, x, &mut scratch);
        let v = lp + self.log_likelihood(&fwd);
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFiniteDensity)
        }
    }

    /// Log posterior and its gradient.
    pub fn log_posterior(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let e = self.evaluate(x)?;
        Ok((e.value, e.gradient))
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation, ModelError> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let fwd = self.forward(x)?;
        let mut grad = vec![0.0; x.len()];
        let prior = priors::log_prior_unconstrained_into(&self.layout, &self.hyper, x, &mut grad);
        let loglik = self.backward(&fwd, &mut grad);
        let value = prior + loglik;
        let max_jitter = fwd.jitter.iter().copied().fold(0.0, f64::max);
        if max_jitter > 0.0 {
            self.jitter_events.fetch_add(1, Ordering::Relaxed);
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteDensity);
        }
        Ok(Evaluation { value, gradient: grad, max_jitter })
    }

    /// Likelihood value and its gradient, accumulated into `grad`.
    fn backward(&self, fwd: &Forward, grad: &mut [f64]) -> f64 {
        let lay = &self.layout;
        let dims = &lay.dims;
        let (nd, np, nl, nc) = (dims.num_diseases, dims.num_predictors, dims.num_locations, dims.num_cohorts);
        let state = &fwd.state;
        let mut g = priors::zero_state(lay);
        let mut table_bar = vec![0.0; fwd.table.len()];
        let mut loglik = 0.0;
        let mut resid = vec![0.0; nd];
        for (i, rec) in self.records.iter().enumerate() {
            let cell_at = (rec.location * nc + rec.cohort) * nd * np;
            let cell = &fwd.table[cell_at..cell_at + nd * np];
            let eps = state.epsilon[i];
            let mut eps_bar = 0.0;
            for j in 0..nd {
                let row = &cell[j * np..(j + 1) * np];
                let eta = row.iter().zip(&rec.covariates).map(|(b, x)| b * x).sum::<f64>() + state.gamma[j] * eps;
                let y = rec.responses[j];
                loglik += bernoulli_logit_lpmf(y, eta);
                let r = y as f64 - inverse_logit(eta);
                resid[j] = r;
                g.gamma[j] += r * eps;
                eps_bar += r * state.gamma[j];
            }
            g.epsilon[i] += eps_bar;
            let cell_bar = &mut table_bar[cell_at..cell_at + nd * np];
            for j in 0..nd {
                let r = resid[j];
                if r == 0.0 {
                    continue;
                }
                for (dst, x) in cell_bar[j * np..(j + 1) * np].iter_mut().zip(&rec.covariates) {
                    *dst += r * x;
                }
            }
        }

        // Coefficient table -> B0, scales and correlated deviations.
        let slices = dims.shift_slices();
        let dev = &fwd.deviations;
        let mut b0_bar = vec![0.0; nd * np];
        let mut xi0_bar = vec![0.0; dev.xi0.len()];
        let mut xi1_bar = vec![0.0; dev.xi1.len()];
        let mut suffix = vec![0.0; nc];
        for j in 0..nd {
            for h in 0..np {
                let jh = j * np + h;
                for l in 0..nl {
                    let mut s = 0.0;
                    let mut t = 0.0;
                    for c in 0..nc {
                        let v = table_bar[((l * nc + c) * nd + j) * np + h];
                        s += v;
                        t += v * c as f64;
                        suffix[c] = v;
                    }
                    b0_bar[jh] += s;
                    if !dims.mask.local {
                        continue;
                    }
                    g.lambda0[jh] += s * dev.xi0[jh * nl + l];
                    xi0_bar[jh * nl + l] = dev.lambda0[jh] * s;
                    if !dims.mask.temporal {
                        continue;
                    }
                    match dims.dynamics {
                        Dynamics::Linear => {
                            g.lambda1[jh] += t * dev.xi1[jh * nl + l];
                            xi1_bar[jh * nl + l] = dev.lambda1[jh] * t;
                        }
                        Dynamics::RandomWalk => {
                            let mut acc = 0.0;
                            for c in (1..nc).rev() {
                                acc += suffix[c];
                                let at = (jh * slices + c - 1) * nl + l;
                                g.lambda1[jh] += acc * dev.xi1[at];
                                xi1_bar[at] = dev.lambda1[jh] * acc;
                            }
                        }
                    }
                }
            }
        }

        // B0 = Phi diag(delta) Psi.
        let rank = dims.rank();
        for j in 0..nd {
            for r in 0..rank {
                let mut acc = 0.0;
                for h in 0..np {
                    acc += b0_bar[j * np + h] * state.psi[r * np + h];
                }
                g.phi[j * rank + r] += state.delta[r] * acc;
                g.delta[r] += state.phi[j * rank + r] * acc;
            }
        }
        for r in 0..rank {
            for h in 0..np {
                let mut acc = 0.0;
                for j in 0..nd {
                    acc += b0_bar[j * np + h] * state.phi[j * rank + r];
                }
                g.psi[r * np + h] += state.delta[r] * acc;
            }
        }

        // xi = L z.
        if dims.mask.local {
            match &fwd.factors {
                None => {
                    g.z0.copy_from_slice(&xi0_bar);
                    if dims.mask.temporal {
                        g.z1.copy_from_slice(&xi1_bar);
                    }
                }
                Some(factors) => {
                    let mut l_bar: Vec<Matrix> = vec![Matrix::zeros(nl); factors.len()];
                    let mut seed_pass = |z: &[f64], zb: &mut [f64], xb: &[f64], slot: usize| {
                        let f = &factors[slot];
                        lower_t_mul_add(f, xb, zb);
                        let lb = &mut l_bar[slot];
                        for a in 0..nl {
                            let v = xb[a];
                            if v == 0.0 {
                                continue;
                            }
                            for b in 0..=a {
                                lb[(a, b)] += v * z[b];
                            }
                        }
                    };
                    let set0 = dims.omega_set(0);
                    for j in 0..nd {
                        for h in 0..np {
                            let o = lay.z0_offset(j, h);
                            seed_pass(
                                &state.z0[o..o + nl],
                                &mut g.z0[o..o + nl],
                                &xi0_bar[o..o + nl],
                                set0 * nd + j,
                            );
                        }
                    }
                    if dims.mask.temporal {
                        let set1 = dims.omega_set(1);
                        for j in 0..nd {
                            for h in 0..np {
                                for k in 0..slices {
                                    let o = lay.z1_offset(j, h, k);
                                    seed_pass(
                                        &state.z1[o..o + nl],
                                        &mut g.z1[o..o + nl],
                                        &xi1_bar[o..o + nl],
                                        set1 * nd + j,
                                    );
                                }
                            }
                        }
                    }
                    self.covariance_backward(fwd, l_bar, &mut g);
                }
            }
        }

        priors::pullback(lay, state, &g, grad);
        loglik
    }

    /// Adjoint of each factor -> mixture -> (omega, theta).
    fn covariance_backward(&self, fwd: &Forward, l_bar: Vec<Matrix>, g: &mut ParameterState) {
        let dims = &self.layout.dims;
        let factors = fwd.factors.as_ref().expect("correlated forward pass");
        let nl = dims.num_locations;
        let mut k_bar: Vec<Matrix> = vec![Matrix::zeros(nl); fwd.kernels.len()];
        for (slot, lb) in l_bar.into_iter().enumerate() {
            let c_bar = cholesky_backward(&factors[slot], lb);
            let w = &fwd.state.omega[slot];
            for (m, km) in fwd.kernels.iter().enumerate() {
                let mut acc = 0.0;
                for a in 0..nl {
                    for b in 0..=a {
                        acc += c_bar[(a, b)] * km[(a, b)];
                    }
                }
                g.omega[slot][m] += acc;
                k_bar[m].add_scaled(w[m], &c_bar);
            }
        }
        for (m, spec) in dims.kernels.iter().enumerate() {
            match spec {
                KernelSpec::Partition => partition_theta_adjoint(&self.locations, &k_bar[m], &mut g.theta_region),
                KernelSpec::Contiguity => g.theta_contiguity += contiguity_theta_adjoint(&self.locations, &k_bar[m]),
                KernelSpec::Distance(_) => {}
            }
        }
    }
}

/// Outcome of comparing the analytic gradient with central finite differences.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradientCheck {
    pub points: usize,
    pub step: f64,
    /// `max |fd - g| / max(|g|, |fd|, 1)` over points and coordinates.
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub analytic: f64,
    pub finite_difference: f64,
}

/// Central finite differences with step `h` at `points` uniform draws on
/// `[-radius, radius]^d`.
pub fn check_gradients(
    target: &PosteriorTarget,
    points: usize,
    radius: f64,
    h: f64,
    seed: u64,
) -> Result<GradientCheck, ModelError> {
    use rand::{Rng, SeedableRng};
    use rayon::prelude::*;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let names = target.layout().names();
    let mut best = GradientCheck {
        points,
        step: h,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        analytic: 0.0,
        finite_difference: 0.0,
    };
    for _ in 0..points {
        let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-radius..=radius)).collect();
        let (_, g) = target.log_posterior(&x)?;
        let fd: Vec<f64> = (0..x.len())
            .into_par_iter()
            .map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                Ok((target.log_posterior_value(&xp)? - target.log_posterior_value(&xm)?) / (2.0 * h))
            })
            .collect::<Result<_, ModelError>>()?;
        for i in 0..x.len() {
            let err = (fd[i] - g[i]).abs() / g[i].abs().max(fd[i].abs()).max(1.0);
            if err > best.max_relative_error || best.worst_parameter.is_empty() {
                best.max_relative_error = err;
                best.worst_parameter = names[i].clone();
                best.analytic = g[i];
                best.finite_difference = fd[i];
            }
        }
    }
    Ok(best)
}

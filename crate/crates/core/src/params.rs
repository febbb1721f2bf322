//! Parameter dimensions, the unconstrained vector layout and the constrained state.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::{Dynamics, KernelSpec, ModelConfig, VariantMask};

/// Sizes that fix the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub num_diseases: usize,
    pub num_predictors: usize,
    pub num_locations: usize,
    pub num_cohorts: usize,
    pub num_regions: usize,
    pub num_respondents: usize,
    pub dynamics: Dynamics,
    pub mask: VariantMask,
    /// Kernels that take part in the mixture under the current mask.
    pub kernels: Vec<KernelSpec>,
    /// 1 when the mixture weights are shared by both scale levels, else 2.
    pub omega_sets: usize,
}

impl Dims {
    pub fn new(config: &ModelConfig, num_locations: usize, num_regions: usize, num_respondents: usize) -> Self {
        let mask = config.variant.mask();
        let kernels = if mask.correlated {
            config
                .kernels
                .iter()
                .copied()
                .filter(|k| mask.contiguity || *k != KernelSpec::Contiguity)
                .collect()
        } else {
            Vec::new()
        };
        let omega_sets = if config.omega_per_scale && mask.temporal { 2 } else { 1 };
        Self {
            num_diseases: config.num_diseases,
            num_predictors: config.num_predictors(),
            num_locations,
            num_cohorts: config.num_cohorts,
            num_regions,
            num_respondents,
            dynamics: config.dynamics,
            mask,
            kernels,
            omega_sets,
        }
    }

    /// Number of factors in the mean factorisation, `min(n_d, n_p)`.
    pub fn rank(&self) -> usize {
        self.num_diseases.min(self.num_predictors)
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn has_contiguity(&self) -> bool {
        self.kernels.contains(&KernelSpec::Contiguity)
    }

    /// Cohort-shift slices per (j, h): one for linear dynamics, `n_c - 1` for a random walk.
    pub fn shift_slices(&self) -> usize {
        match self.dynamics {
            Dynamics::Linear => 1,
            Dynamics::RandomWalk => self.num_cohorts.saturating_sub(1),
        }
    }

    /// Which mixture-weight set drives scale level `s` (0 = initial state, 1 = shifts).
    pub fn omega_set(&self, s: usize) -> usize {
        if self.omega_sets == 2 {
            s
        } else {
            0
        }
    }

    pub fn coef_count(&self) -> usize {
        self.num_diseases * self.num_predictors
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of each block in the flat unconstrained vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub dims: Dims,
    pub phi: Range<usize>,
    pub psi: Range<usize>,
    pub log_delta: Range<usize>,
    pub log_lambda0_sq: Option<Range<usize>>,
    pub log_lambda1_sq: Option<Range<usize>>,
    pub logit_theta_region: Option<Range<usize>>,
    pub logit_theta_contiguity: Option<usize>,
    pub alr_omega: Option<Range<usize>>,
    pub log_alpha_lambda0: Option<usize>,
    pub log_alpha_lambda1: Option<usize>,
    pub log_gamma1: usize,
    pub gamma_rest: Range<usize>,
    pub z0: Option<Range<usize>>,
    pub z1: Option<Range<usize>>,
    pub epsilon: Range<usize>,
    pub dim: usize,
}

impl ParamLayout {
    pub fn new(dims: Dims) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (nd, np, nl) = (dims.num_diseases, dims.num_predictors, dims.num_locations);
        let rank = dims.rank();
        let phi = take(nd * rank);
        let psi = take(rank * np);
        let log_delta = take(rank);
        let local = dims.mask.local;
        let temporal = dims.mask.temporal && local;
        let correlated = dims.mask.correlated && local;
        let log_lambda0_sq = local.then(|| take(nd * np));
        let log_lambda1_sq = temporal.then(|| take(nd * np));
        let logit_theta_region =
            (correlated && dims.kernels.contains(&KernelSpec::Partition)).then(|| take(dims.num_regions));
        let logit_theta_contiguity = (correlated && dims.has_contiguity()).then(|| take(1).start);
        let k = dims.num_kernels();
        let alr_omega = (correlated && k > 1).then(|| take(dims.omega_sets * nd * (k - 1)));
        let log_alpha_lambda0 = local.then(|| take(1).start);
        let log_alpha_lambda1 = temporal.then(|| take(1).start);
        let log_gamma1 = take(1).start;
        let gamma_rest = take(nd - 1);
        let z0 = local.then(|| take(nd * np * nl));
        let z1 = temporal.then(|| take(nd * np * dims.shift_slices() * nl));
        let epsilon = take(dims.num_respondents);
        let dim = at;
        Self {
            dims,
            phi,
            psi,
            log_delta,
            log_lambda0_sq,
            log_lambda1_sq,
            logit_theta_region,
            logit_theta_contiguity,
            alr_omega,
            log_alpha_lambda0,
            log_alpha_lambda1,
            log_gamma1,
            gamma_rest,
            z0,
            z1,
            epsilon,
            dim,
        }
    }

    /// Offsets table for run metadata.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        let mut push = |name: &str, r: Range<usize>| {
            if !r.is_empty() {
                out.push(Block { name: name.into(), offset: r.start, len: r.len() });
            }
        };
        push("phi", self.phi.clone());
        push("psi", self.psi.clone());
        push("log_delta", self.log_delta.clone());
        if let Some(r) = &self.log_lambda0_sq {
            push("log_lambda0_sq", r.clone());
        }
        if let Some(r) = &self.log_lambda1_sq {
            push("log_lambda1_sq", r.clone());
        }
        if let Some(r) = &self.logit_theta_region {
            push("logit_theta_region", r.clone());
        }
        if let Some(i) = self.logit_theta_contiguity {
            push("logit_theta_contiguity", i..i + 1);
        }
        if let Some(r) = &self.alr_omega {
            push("alr_omega", r.clone());
        }
        if let Some(i) = self.log_alpha_lambda0 {
            push("log_alpha_lambda0", i..i + 1);
        }
        if let Some(i) = self.log_alpha_lambda1 {
            push("log_alpha_lambda1", i..i + 1);
        }
        push("log_gamma1", self.log_gamma1..self.log_gamma1 + 1);
        push("gamma_rest", self.gamma_rest.clone());
        if let Some(r) = &self.z0 {
            push("z0", r.clone());
        }
        if let Some(r) = &self.z1 {
            push("z1", r.clone());
        }
        push("epsilon", self.epsilon.clone());
        out
    }

    /// One name per unconstrained coordinate.
    pub fn names(&self) -> Vec<String> {
        let d = &self.dims;
        let (nd, np, nl, rank) = (d.num_diseases, d.num_predictors, d.num_locations, d.rank());
        let mut names = Vec::with_capacity(self.dim);
        for j in 0..nd {
            for r in 0..rank {
                names.push(format!("phi[{j},{r}]"));
            }
        }
        for r in 0..rank {
            for h in 0..np {
                names.push(format!("psi[{r},{h}]"));
            }
        }
        for r in 0..rank {
            names.push(format!("log_delta[{r}]"));
        }
        for (present, label) in [(self.log_lambda0_sq.is_some(), "log_lambda0_sq"), (self.log_lambda1_sq.is_some(), "log_lambda1_sq")] {
            if present {
                for j in 0..nd {
                    for h in 0..np {
                        names.push(format!("{label}[{j},{h}]"));
                    }
                }
            }
        }
        if self.logit_theta_region.is_some() {
            for r in 0..d.num_regions {
                names.push(format!("logit_theta_region[{r}]"));
            }
        }
        if self.logit_theta_contiguity.is_some() {
            names.push("logit_theta_contiguity".into());
        }
        if self.alr_omega.is_some() {
            for s in 0..d.omega_sets {
                for j in 0..nd {
                    for m in 0..d.num_kernels() - 1 {
                        names.push(format!("alr_omega[{s},{j},{m}]"));
                    }
                }
            }
        }
        if self.log_alpha_lambda0.is_some() {
            names.push("log_alpha_lambda0".into());
        }
        if self.log_alpha_lambda1.is_some() {
            names.push("log_alpha_lambda1".into());
        }
        names.push("log_gamma1".into());
        for j in 1..nd {
            names.push(format!("gamma[{j}]"));
        }
        if self.z0.is_some() {
            for j in 0..nd {
                for h in 0..np {
                    for l in 0..nl {
                        names.push(format!("z0[{j},{h},{l}]"));
                    }
                }
            }
        }
        if self.z1.is_some() {
            for j in 0..nd {
                for h in 0..np {
                    for k in 0..d.shift_slices() {
                        for l in 0..nl {
                            names.push(format!("z1[{j},{h},{k},{l}]"));
                        }
                    }
                }
            }
        }
        for i in 0..d.num_respondents {
            names.push(format!("epsilon[{i}]"));
        }
        debug_assert_eq!(names.len(), self.dim);
        names
    }

    /// Offset of the (j, h) seed vector inside the z0 block.
    #[inline]
    pub fn z0_offset(&self, j: usize, h: usize) -> usize {
        (j * self.dims.num_predictors + h) * self.dims.num_locations
    }

    /// Offset of the (j, h, slice) seed vector inside the z1 block.
    #[inline]
    pub fn z1_offset(&self, j: usize, h: usize, k: usize) -> usize {
        ((j * self.dims.num_predictors + h) * self.dims.shift_slices() + k) * self.dims.num_locations
    }
}

/// Constrained parameter values. Blocks switched off by the variant mask
/// hold their neutral values (zero scales, zero seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    /// `n_d x rank`, row-major.
    pub phi: Vec<f64>,
    /// `rank x n_p`, row-major.
    pub psi: Vec<f64>,
    pub delta: Vec<f64>,
    /// `n_d x n_p` scales of the initial-state deviations.
    pub lambda0: Vec<f64>,
    /// `n_d x n_p` scales of the cohort shifts.
    pub lambda1: Vec<f64>,
    pub theta_region: Vec<f64>,
    pub theta_contiguity: f64,
    /// Indexed `[set * n_d + j]`, each a simplex over the active kernels.
    pub omega: Vec<Vec<f64>>,
    pub alpha_lambda: [f64; 2],
    pub gamma: Vec<f64>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl ParameterState {
    /// Neutral state with the given shapes: unit factors, zero deviations.
    pub fn neutral(dims: &Dims) -> Self {
        let (nd, np, nl, rank) = (dims.num_diseases, dims.num_predictors, dims.num_locations, dims.rank());
        let k = dims.num_kernels().max(1);
        let mut gamma = vec![0.0; nd];
        gamma[0] = 1.0;
        Self {
            phi: vec![0.0; nd * rank],
            psi: vec![0.0; rank * np],
            delta: vec![1.0; rank],
            lambda0: vec![0.0; nd * np],
            lambda1: vec![0.0; nd * np],
            theta_region: vec![0.5; dims.num_regions],
            theta_contiguity: 0.5,
            omega: vec![vec![1.0 / k as f64; k]; dims.omega_sets * nd],
            alpha_lambda: [1.0, 1.0],
            gamma,
            z0: vec![0.0; nd * np * nl],
            z1: vec![0.0; nd * np * dims.shift_slices() * nl],
            epsilon: vec![0.0; dims.num_respondents],
        }
    }

    /// `B0 = Phi diag(delta) Psi`, row-major `n_d x n_p`.
    pub fn b0(&self, dims: &Dims) -> Vec<f64> {
        crate::coefficients::assemble_b0(&self.factorized_mean(dims))
    }

    pub fn factorized_mean(&self, dims: &Dims) -> crate::coefficients::FactorizedMean {
        crate::coefficients::FactorizedMean {
            phi: self.phi.clone(),
            delta: self.delta.clone(),
            psi: self.psi.clone(),
            num_diseases: dims.num_diseases,
            num_predictors: dims.num_predictors,
        }
    }

    pub fn omega_for(&self, dims: &Dims, set: usize, j: usize) -> &[f64] {
        &self.omega[set * dims.num_diseases + j]
    }
}

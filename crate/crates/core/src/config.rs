//! Run configuration: model structure, hyperparameters, sampler and simulation settings.
//!
//! A single TOML document drives `simulate`, `fit` and the evaluation commands.
//! Unknown keys are rejected so that typos surface as configuration errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Individual-level covariates in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Intercept,
    Sex,
    Edu,
    Eco,
    Smoke,
    Age,
    AgeSex,
}

impl Covariate {
    pub const ALL: [Covariate; 7] = [
        Covariate::Intercept,
        Covariate::Sex,
        Covariate::Edu,
        Covariate::Eco,
        Covariate::Smoke,
        Covariate::Age,
        Covariate::AgeSex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Intercept => "intercept",
            Covariate::Sex => "sex",
            Covariate::Edu => "edu",
            Covariate::Eco => "eco",
            Covariate::Smoke => "smoke",
            Covariate::Age => "age",
            Covariate::AgeSex => "age_sex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// One entry in the kernel roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelSpec {
    Partition,
    Contiguity,
    /// Exponential kernel over the distance matrix with this index.
    Distance(usize),
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Partition => write!(f, "partition"),
            KernelSpec::Contiguity => write!(f, "contiguity"),
            KernelSpec::Distance(m) => write!(f, "distance{m}"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "partition" => Ok(KernelSpec::Partition),
            "contiguity" => Ok(KernelSpec::Contiguity),
            _ => s
                .strip_prefix("distance")
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(KernelSpec::Distance)
                .ok_or_else(|| format!("unknown kernel `{s}`")),
        }
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<KernelSpec> for String {
    fn from(k: KernelSpec) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    /// Coefficients drift linearly in the cohort offset with a location-specific slope.
    Linear,
    /// Independent correlated shifts accumulate from one cohort to the next.
    RandomWalk,
}

/// Table 1 model roster. Each variant is a mask over the same target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    FullSt,
    FullNs,
    FullNst,
    Il,
    Fe,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::FullSt => "full-st",
            ModelVariant::FullNs => "full-ns",
            ModelVariant::FullNst => "full-nst",
            ModelVariant::Il => "il",
            ModelVariant::Fe => "fe",
        }
    }

    pub fn mask(self) -> VariantMask {
        let full = VariantMask { local: true, temporal: true, correlated: true, contiguity: true };
        match self {
            ModelVariant::FullSt => full,
            ModelVariant::FullNs => VariantMask { contiguity: false, ..full },
            ModelVariant::FullNst => VariantMask { contiguity: false, temporal: false, ..full },
            ModelVariant::Il => VariantMask { correlated: false, contiguity: false, ..full },
            ModelVariant::Fe => VariantMask { local: false, temporal: false, correlated: false, contiguity: false },
        }
    }
}

impl FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <ModelVariant as clap::ValueEnum>::from_str(s, true)
    }
}

/// Which parameter blocks are free under a model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantMask {
    /// Local deviations exist at all (Lambda^0 free).
    pub local: bool,
    /// Cohort shifts exist (Lambda^1 free).
    pub temporal: bool,
    /// Location correlation from the kernel mixture; otherwise identity.
    pub correlated: bool,
    /// Contiguity kernel participates in the mixture.
    pub contiguity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_diseases: usize,
    pub covariates: Vec<Covariate>,
    pub num_cohorts: usize,
    pub kernels: Vec<KernelSpec>,
    pub dynamics: Dynamics,
    /// Separate mixture weights for the initial-state and cohort-shift fields.
    pub omega_per_scale: bool,
    pub variant: ModelVariant,
    pub age_min: f64,
    pub age_span: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_diseases: 3,
            covariates: vec![
                Covariate::Intercept,
                Covariate::Sex,
                Covariate::Smoke,
                Covariate::Age,
                Covariate::AgeSex,
            ],
            num_cohorts: 5,
            kernels: vec![KernelSpec::Partition, KernelSpec::Contiguity, KernelSpec::Distance(0)],
            dynamics: Dynamics::Linear,
            omega_per_scale: false,
            variant: ModelVariant::FullSt,
            age_min: 51.0,
            age_span: 11.0,
        }
    }
}

impl ModelConfig {
    pub fn num_predictors(&self) -> usize {
        self.covariates.len()
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn age_max(&self) -> f64 {
        self.age_min + self.age_span
    }

    pub fn num_distance_kernels(&self) -> usize {
        self.kernels
            .iter()
            .filter_map(|k| match k {
                KernelSpec::Distance(m) => Some(m + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn covariate_index(&self, c: Covariate) -> Option<usize> {
        self.covariates.iter().position(|&x| x == c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_diseases == 0 {
            return bad("model.num_diseases must be >= 1".into());
        }
        if self.num_cohorts == 0 {
            return bad("model.num_cohorts must be >= 1".into());
        }
        if self.covariates.first() != Some(&Covariate::Intercept) {
            return bad("model.covariates must start with `intercept`".into());
        }
        if self.covariates.windows(2).any(|w| w[0] >= w[1]) {
            return bad("model.covariates must be distinct and in canonical order".into());
        }
        if self.covariates.contains(&Covariate::AgeSex)
            && !(self.covariates.contains(&Covariate::Age) && self.covariates.contains(&Covariate::Sex))
        {
            return bad("model.covariates: `age_sex` requires `age` and `sex`".into());
        }
        if self.kernels.iter().filter(|k| **k == KernelSpec::Partition).count() != 1 {
            return bad("model.kernels must contain exactly one `partition`".into());
        }
        if self.kernels.iter().filter(|k| **k == KernelSpec::Contiguity).count() != 1 {
            return bad("model.kernels must contain exactly one `contiguity`".into());
        }
        if !(self.age_span > 0.0) {
            return bad("model.age_span must be positive".into());
        }
        Ok(())
    }
}

/// Fixed prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    /// Gamma shape for the diagonal of the factorised mean.
    pub a_delta: f64,
    /// Gamma rate for the diagonal of the factorised mean.
    pub b_delta: f64,
    /// Variance of the local deviation coefficients.
    pub sigma2_zeta: f64,
    /// Expected fraction of non-shrunk local scales; `None` means 1 / n_p.
    pub rho: Option<f64>,
    /// Symmetric Dirichlet concentration on the kernel weights.
    pub a_omega: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    /// Half-normal scale on the first comorbidity loading.
    pub gamma1_scale: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            a_delta: 0.3,
            b_delta: 0.6,
            sigma2_zeta: 0.5,
            rho: None,
            a_omega: 2.0,
            beta_a: 2.0,
            beta_b: 2.0,
            gamma1_scale: 1.0,
        }
    }
}

impl Hyperparameters {
    pub fn rho(&self, num_predictors: usize) -> f64 {
        self.rho.unwrap_or(1.0 / num_predictors as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("priors.a_delta", self.a_delta),
            ("priors.b_delta", self.b_delta),
            ("priors.sigma2_zeta", self.sigma2_zeta),
            ("priors.a_omega", self.a_omega),
            ("priors.beta_a", self.beta_a),
            ("priors.beta_b", self.beta_b),
            ("priors.gamma1_scale", self.gamma1_scale),
            ("priors.rho", self.rho.unwrap_or(1.0)),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Unit,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub sampling: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub metric: MetricKind,
    /// Starting step size before adaptation; fixed when `warmup == 0`.
    pub step_size: f64,
    /// Half-width of the uniform box for initial unconstrained values.
    pub init_radius: f64,
    pub max_energy_error: f64,
    /// Derived from the root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1500,
            sampling: 1500,
            target_accept: 0.8,
            max_tree_depth: 10,
            metric: MetricKind::Diagonal,
            step_size: 1.0,
            init_radius: 2.0,
            max_energy_error: 1000.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.chains == 0 {
            return Err("sampler.chains must be >= 1".into());
        }
        if self.sampling == 0 {
            return Err("sampler.sampling must be >= 1".into());
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err("sampler.target_accept must lie in (0, 1)".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err("sampler.step_size must be positive and finite".into());
        }
        if self.max_tree_depth == 0 {
            return Err("sampler.max_tree_depth must be >= 1".into());
        }
        if !(self.init_radius >= 0.0) || !(self.max_energy_error > 0.0) {
            return Err("sampler.init_radius / max_energy_error invalid".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Grid,
    RandomGeometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_locations: usize,
    pub num_regions: usize,
    pub respondents_per_cell: usize,
    pub topology: Topology,
    /// Connection radius on the unit square for the random-geometric topology.
    pub radius: f64,
    /// Dimension of the synthetic location feature vectors behind each distance matrix.
    pub feature_dim: usize,
    pub rate_edu: f64,
    pub rate_eco: f64,
    pub rate_smoke: f64,
    /// Path to a truth.json whose parameters are used instead of a prior draw.
    pub truth: Option<String>,
    /// Log-odds decrease per later cohort, row-major `n_d x n_p`; empty for none.
    /// Positive values make later cohorts healthier.
    pub cohort_improvement: Vec<f64>,
    /// Survey waves crossed with the cohorts in the bias demo.
    pub survey_years: usize,
    pub bias_intercept: f64,
    /// True within-cohort age slope in the bias demo (per standardised age unit).
    pub bias_age_slope: f64,
    /// Derived from the root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_locations: 16,
            num_regions: 2,
            respondents_per_cell: 50,
            topology: Topology::Grid,
            radius: 0.35,
            feature_dim: 2,
            rate_edu: 0.4,
            rate_eco: 0.3,
            rate_smoke: 0.45,
            truth: None,
            cohort_improvement: Vec::new(),
            survey_years: 5,
            bias_intercept: -1.0,
            bias_age_slope: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_locations == 0 || self.num_regions == 0 || self.respondents_per_cell == 0 {
            return Err(Error::Config("simulation counts must be positive".into()));
        }
        if self.num_regions > self.num_locations {
            return Err(Error::Config("simulation.num_regions exceeds num_locations".into()));
        }
        for (name, r) in [
            ("simulation.rate_edu", self.rate_edu),
            ("simulation.rate_eco", self.rate_eco),
            ("simulation.rate_smoke", self.rate_smoke),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.survey_years == 0 {
            return Err(Error::Config("simulation.survey_years must be positive".into()));
        }
        if self.cohort_improvement.iter().chain([&self.bias_intercept, &self.bias_age_slope]).any(|v| !v.is_finite()) {
            return Err(Error::Config("simulation drift settings must be finite".into()));
        }
        if !(self.radius > 0.0) || self.feature_dim == 0 {
            return Err(Error::Config("simulation.radius and simulation.feature_dim must be positive".into()));
        }
        if self.topology == Topology::Grid {
            let side = (self.num_locations as f64).sqrt().round() as usize;
            if side * side != self.num_locations {
                return Err(Error::Config("simulation.num_locations must be a perfect square for grid".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseUnit {
    Respondent,
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// Replicates use a fresh individual latent drawn from its prior.
    Prior,
    /// Replicates reuse the posterior draw of each respondent's latent.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pointwise: PointwiseUnit,
    pub ppc_epsilon: EpsilonMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pointwise: PointwiseUnit::Respondent, ppc_epsilon: EpsilonMode::Prior }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub priors: Hyperparameters,
    pub sampler: SamplerConfig,
    pub simulation: SimConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.sampler.seed = derive_seed(cfg.seed, 1);
        cfg.simulation.seed = derive_seed(cfg.seed, 2);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.priors.validate()?;
        self.sampler.validate().map_err(Error::Config)?;
        self.simulation.validate()?;
        let n = self.model.num_diseases * self.model.num_predictors();
        if !self.simulation.cohort_improvement.is_empty() && self.simulation.cohort_improvement.len() != n {
            return Err(Error::Config(format!("simulation.cohort_improvement must have 0 or {n} entries")));
        }
        Ok(())
    }
}

/// Derives an independent sub-seed from the root seed (SplitMix64 finaliser).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifier of the pseudo-random generator behind every stream.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9), per-stream seed_from_u64 + set_stream";

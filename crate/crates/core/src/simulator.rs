//! Synthetic locations, parameters and pseudo-panel survey data drawn from the
//! generative model, plus the survey-year versus birth-cohort bias demo.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{inverse_logit, linear_predictor};
use crate::config::{derive_seed, Hyperparameters, ModelConfig, PointwiseUnit, SimConfig, Topology};
use crate::data::{build_design, write_dataset, LocationTable, RawCovariates, RespondentRecord};
use crate::error::{Error, Result, SimError};
use crate::linalg::{cholesky, Matrix};
use crate::model::PosteriorTarget;
use crate::params::{Dims, ParamLayout, ParameterState};
use crate::priors;

/// `|eta|` beyond which the response is deterministic.
pub const ETA_GUARD: f64 = 40.0;

const STREAM_LOCATIONS: u64 = 11;
const STREAM_PARAMS: u64 = 12;
const STREAM_COVARIATES: u64 = 13;
const STREAM_RESPONSES: u64 = 14;
const STREAM_BIAS: u64 = 15;

fn stream(seed: u64, tag: u64, sub: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, tag));
    rng.set_stream(sub);
    rng
}

/// Every latent used to generate a dataset, keyed by the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub variant: String,
    pub names: Vec<String>,
    pub unconstrained: Vec<f64>,
    pub state: ParameterState,
    /// `B0`, row-major `n_d x n_p`.
    pub b0: Vec<f64>,
    pub cohort_improvement: Vec<f64>,
}

impl Truth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub locations: LocationTable,
    pub records: Vec<RespondentRecord>,
    pub truth: Truth,
}

impl SimulatedData {
    /// Writes `respondents.csv`, the location files and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path, model: &ModelConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
        self.locations.write(dir)?;
        write_dataset(&dir.join("respondents.csv"), &self.records, model)?;
        self.truth.write(&dir.join("truth.json"))
    }
}

/// Rescales the off-diagonal entries to mean one.
fn normalized_distances(features: &[Vec<f64>]) -> Matrix {
    let n = features.len();
    let mut d = Matrix::from_fn(n, |a, b| {
        features[a].iter().zip(&features[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    });
    if n > 1 {
        let total: f64 = (0..n).flat_map(|a| (0..n).filter(move |b| *b != a).map(move |b| (a, b))).map(|p| d[p]).sum();
        let mean = total / (n * (n - 1)) as f64;
        if mean > 0.0 {
            for a in 0..n {
                for b in 0..n {
                    d[(a, b)] /= mean;
                }
            }
        }
    }
    d
}

fn grid_adjacency(n: usize) -> Vec<Vec<usize>> {
    let side = (n as f64).sqrt().round() as usize;
    (0..n)
        .map(|l| {
            let (r, c) = (l / side, l % side);
            let mut v = Vec::with_capacity(4);
            if r > 0 {
                v.push(l - side);
            }
            if c > 0 {
                v.push(l - 1);
            }
            if c + 1 < side {
                v.push(l + 1);
            }
            if r + 1 < side {
                v.push(l + side);
            }
            v
        })
        .collect()
}

/// Points on the unit square joined within `radius`; an isolated point is
/// linked to its nearest neighbour. Returns the adjacency and the points.
fn geometric_adjacency(n: usize, radius: f64, rng: &mut ChaCha20Rng) -> (Vec<Vec<usize>>, Vec<[f64; 2]>) {
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let dist = |a: usize, b: usize| ((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt();
    let mut adj = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            if dist(a, b) < radius {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    for a in 0..n {
        if adj[a].is_empty() && n > 1 {
            let b = (0..n).filter(|b| *b != a).min_by(|x, y| dist(a, *x).total_cmp(&dist(a, *y))).unwrap();
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    (adj, pts)
}

/// Synthetic locations: lattice or random-geometric adjacency, regions as
/// contiguous blocks, and `num_distance` contextual distance matrices.
pub fn gen_locations(sim: &SimConfig, num_distance: usize) -> Result<LocationTable> {
    let n = sim.num_locations;
    let r = sim.num_regions;
    let mut rng = stream(sim.seed, STREAM_LOCATIONS, 0);
    let (adjacency, order) = match sim.topology {
        Topology::Grid => (grid_adjacency(n), (0..n).collect::<Vec<_>>()),
        Topology::RandomGeometric => {
            let (adj, pts) = geometric_adjacency(n, sim.radius, &mut rng);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| pts[*a][0].total_cmp(&pts[*b][0]));
            (adj, order)
        }
    };
    let mut region_of = vec![None; n];
    for (rank, l) in order.iter().enumerate() {
        region_of[*l] = Some(rank * r / n);
    }
    let distances = (0..num_distance)
        .map(|_| {
            let features: Vec<Vec<f64>> =
                (0..n).map(|_| (0..sim.feature_dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
            normalized_distances(&features)
        })
        .collect();
    Ok(LocationTable::new(region_of, adjacency, distances)?)
}

fn draw_raw<R: Rng>(sim: &SimConfig, model: &ModelConfig, rng: &mut R) -> RawCovariates {
    let flag = |p: f64, rng: &mut R| u8::from(rng.random::<f64>() < p);
    RawCovariates {
        sex: Some(flag(0.5, rng)),
        edu: Some(flag(sim.rate_edu, rng)),
        eco: Some(flag(sim.rate_eco, rng)),
        smoke: Some(flag(sim.rate_smoke, rng)),
        age: Some(model.age_min + model.age_span * rng.random::<f64>()),
    }
}

/// Respondents of every (location, cohort) cell with covariates drawn and
/// responses left at zero.
pub fn gen_respondents(sim: &SimConfig, model: &ModelConfig, num_locations: usize) -> Result<Vec<RespondentRecord>> {
    let nc = model.num_cohorts;
    let per = sim.respondents_per_cell;
    let cells: Vec<Vec<RespondentRecord>> = (0..num_locations * nc)
        .into_par_iter()
        .map(|cell| {
            let mut rng = stream(sim.seed, STREAM_COVARIATES, cell as u64);
            let (l, c) = (cell / nc, cell % nc);
            (0..per)
                .map(|k| {
                    let raw = draw_raw(sim, model, &mut rng);
                    let covariates = build_design(&raw, model)?;
                    Ok(RespondentRecord {
                        id: format!("s{l}_{c}_{k}"),
                        location: l,
                        cohort: c,
                        responses: vec![0; model.num_diseases],
                        covariates,
                        raw,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(cells.into_iter().flatten().collect())
}

fn shapes_match(a: &ParameterState, b: &ParameterState) -> bool {
    a.phi.len() == b.phi.len()
        && a.psi.len() == b.psi.len()
        && a.delta.len() == b.delta.len()
        && a.lambda0.len() == b.lambda0.len()
        && a.lambda1.len() == b.lambda1.len()
        && a.theta_region.len() == b.theta_region.len()
        && a.omega.len() == b.omega.len()
        && a.omega.iter().zip(&b.omega).all(|(x, y)| x.len() == y.len())
        && a.gamma.len() == b.gamma.len()
        && a.z0.len() == b.z0.len()
        && a.z1.len() == b.z1.len()
}

/// Draws `y` for the given respondents and parameters. `params` defaults to a
/// prior draw; a supplied state whose respondent count differs gets fresh
/// standard-normal individual latents.
pub fn gen_dataset(
    sim: &SimConfig,
    model: &ModelConfig,
    hyper: &Hyperparameters,
    locations: LocationTable,
    params: Option<ParameterState>,
) -> Result<SimulatedData> {
    let np = model.num_predictors();
    let nd = model.num_diseases;
    if !sim.cohort_improvement.is_empty() && sim.cohort_improvement.len() != nd * np {
        return Err(SimError::InvalidConfig(format!("cohort_improvement must have {} entries", nd * np)).into());
    }
    let mut records = gen_respondents(sim, model, locations.num_locations())?;
    let dims = Dims::new(model, locations.num_locations(), locations.num_regions(), records.len());
    let layout = ParamLayout::new(dims.clone());
    let mut rng = stream(sim.seed, STREAM_PARAMS, 0);
    let state = match params {
        None => priors::sample_prior(&layout, hyper, &mut rng),
        Some(mut s) => {
            let reference = ParameterState::neutral(&dims);
            if !shapes_match(&s, &reference) {
                return Err(SimError::InvalidConfig("supplied parameters do not match the model layout".into()).into());
            }
            if s.epsilon.len() != records.len() {
                s.epsilon = (0..records.len()).map(|_| rng.sample(StandardNormal)).collect();
            }
            s
        }
    };
    let target = PosteriorTarget::new(model, hyper, records.clone(), locations.clone(), PointwiseUnit::Respondent)?;
    let fwd = target.forward_state(state)?;
    let mut table = fwd.table.clone();
    let nc = model.num_cohorts;
    if !sim.cohort_improvement.is_empty() {
        for l in 0..dims.num_locations {
            for c in 0..nc {
                for (jh, d) in sim.cohort_improvement.iter().enumerate() {
                    table[(l * nc + c) * nd * np + jh] -= d * c as f64;
                }
            }
        }
    }
    let per = sim.respondents_per_cell;
    let state = &fwd.state;
    records.par_chunks_mut(per).enumerate().for_each(|(cell, chunk)| {
        let mut rng = stream(sim.seed, STREAM_RESPONSES, cell as u64);
        for (k, rec) in chunk.iter_mut().enumerate() {
            let i = cell * per + k;
            let eta = linear_predictor(&dims, &table, rec, &state.gamma, state.epsilon[i]);
            rec.responses = eta.iter().map(|e| draw_bernoulli_logit(*e, &mut rng)).collect();
        }
    });
    let truth = Truth {
        variant: model.variant.name().to_string(),
        names: layout.names(),
        unconstrained: priors::to_unconstrained(&layout, state),
        state: state.clone(),
        b0: fwd.b0.clone(),
        cohort_improvement: sim.cohort_improvement.clone(),
    };
    Ok(SimulatedData { locations, records, truth })
}

/// One Bernoulli-logit draw, deterministic once `|eta| >= 40`.
pub fn draw_bernoulli_logit<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> u8 {
    if eta <= -ETA_GUARD {
        0
    } else if eta >= ETA_GUARD {
        1
    } else {
        u8::from(rng.random::<f64>() < inverse_logit(eta))
    }
}

/// Locations plus data from one config: the truth file when given, else a prior draw.
pub fn simulate(sim: &SimConfig, model: &ModelConfig, hyper: &Hyperparameters) -> Result<SimulatedData> {
    let locations = gen_locations(sim, model.num_distance_kernels())?;
    let params = match &sim.truth {
        Some(p) => Some(Truth::load(Path::new(p))?.state),
        None => None,
    };
    gen_dataset(sim, model, hyper, locations, params)
}

/// Rank of the true value among posterior draws, for simulation-based calibration.
pub fn sbc_rank(truth: f64, draws: &[f64]) -> usize {
    draws.iter().filter(|d| **d < truth).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasDemo {
    pub slope_by_survey_year: SlopeEstimate,
    pub slope_by_cohort: SlopeEstimate,
    /// `slope_by_survey_year - slope_by_cohort`.
    pub difference: f64,
    /// `sqrt(se_year^2 + se_cohort^2)`.
    pub combined_se: f64,
}

/// Logistic regression with one intercept per group and a common slope,
/// fitted by Newton's method. Returns the slope with its Fisher standard error.
fn grouped_logistic_slope(groups: &[usize], x: &[f64], y: &[u8], num_groups: usize) -> Result<SlopeEstimate> {
    let p = num_groups + 1;
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut info = Matrix::zeros(p);
        let mut score = vec![0.0; p];
        for ((g, xi), yi) in groups.iter().zip(x).zip(y) {
            let pi = inverse_logit(beta[*g] + beta[num_groups] * xi);
            let w = pi * (1.0 - pi);
            let r = f64::from(*yi) - pi;
            score[*g] += r;
            score[num_groups] += r * xi;
            info[(*g, *g)] += w;
            info[(num_groups, *g)] += w * xi;
            info[(*g, num_groups)] += w * xi;
            info[(num_groups, num_groups)] += w * xi * xi;
        }
        let chol = cholesky(&info).ok_or_else(|| SimError::InvalidConfig("singular information in bias fit".into()))?;
        let step = chol_solve(&chol, &score);
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        if step.iter().all(|s| s.abs() < 1e-10) {
            let mut e = vec![0.0; p];
            e[num_groups] = 1.0;
            let var = chol_solve(&chol, &e)[num_groups];
            return Ok(SlopeEstimate { estimate: beta[num_groups], se: var.sqrt() });
        }
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 50.0) {
            break;
        }
    }
    Err(SimError::InvalidConfig("bias fit did not converge (separated data)".into()).into())
}

fn chol_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.dim();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Crosses `num_cohorts` birth cohorts with `survey_years` waves. Cohort `c`
/// is born `c` years after the first; its age at wave `s` is `s - c` plus an
/// offset, rescaled to `[0, 1]`. The log-odds are
/// `bias_intercept + bias_age_slope * age - improvement * c`, with the
/// improvement taken from the first entry of `cohort_improvement`.
/// Returns the common age slope from survey-year strata and from cohort strata.
pub fn bias_demo(sim: &SimConfig, model: &ModelConfig) -> Result<BiasDemo> {
    let nc = model.num_cohorts;
    let ns = sim.survey_years;
    if nc < 2 || ns < 2 {
        return Err(SimError::InsufficientCrossing.into());
    }
    let improvement = sim.cohort_improvement.first().copied().unwrap_or(0.0);
    let span = (ns + nc - 2) as f64;
    let per = sim.respondents_per_cell;
    type Cell = (usize, usize, Vec<(f64, u8)>);
    let cells: Vec<Cell> = (0..nc * ns)
        .into_par_iter()
        .map(|cell| {
            let (c, s) = (cell / ns, cell % ns);
            let age = (s + nc - 1 - c) as f64 / span;
            let eta = sim.bias_intercept + sim.bias_age_slope * age - improvement * c as f64;
            let mut rng = stream(sim.seed, STREAM_BIAS, cell as u64);
            (c, s, (0..per).map(|_| (age, draw_bernoulli_logit(eta, &mut rng))).collect())
        })
        .collect();
    let mut by_year = Vec::new();
    let mut by_cohort = Vec::new();
    let mut ages = Vec::new();
    let mut ys = Vec::new();
    for (c, s, obs) in &cells {
        for (a, y) in obs {
            by_year.push(*s);
            by_cohort.push(*c);
            ages.push(*a);
            ys.push(*y);
        }
    }
    let year = grouped_logistic_slope(&by_year, &ages, &ys, ns)?;
    let cohort = grouped_logistic_slope(&by_cohort, &ages, &ys, nc)?;
    Ok(BiasDemo {
        slope_by_survey_year: year,
        slope_by_cohort: cohort,
        difference: year.estimate - cohort.estimate,
        combined_se: (year.se * year.se + cohort.se * cohort.se).sqrt(),
    })
}

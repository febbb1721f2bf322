#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use multimorb::cli::{main_with_args, RunManifest};
use multimorb::model::bernoulli_logit_lpmf;
use multimorb::sampler::LogDensity;

/// Small run configuration used across command tests.
pub fn small_config(seed: u64, variant: &str, extra: &str) -> String {
    format!(
        "seed = {seed}\n\
         [model]\n\
         num_diseases = 2\n\
         covariates = [\"intercept\", \"sex\", \"age\"]\n\
         num_cohorts = 2\n\
         variant = \"{variant}\"\n\
         [sampler]\n\
         chains = 2\n\
         warmup = 100\n\
         sampling = 100\n\
         [simulation]\n\
         num_locations = 4\n\
         num_regions = 2\n\
         respondents_per_cell = 6\n\
         {extra}"
    )
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Runs the command line in-process and returns the exit code.
pub fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let mut v = vec!["multimorb".to_string()];
    v.extend(args.iter().map(|a| a.as_ref().to_string()));
    main_with_args(v)
}

pub fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

pub fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

/// Three-coefficient logistic regression with standard normal priors.
pub struct Logistic3 {
    pub x: Vec<[f64; 3]>,
    pub y: Vec<u8>,
    pub prior_sd: f64,
}

impl Logistic3 {
    pub fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        self.x[i].iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    pub fn without(&self, i: usize) -> Self {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        x.remove(i);
        y.remove(i);
        Self { x, y, prior_sd: self.prior_sd }
    }
}

impl LogDensity for Logistic3 {
    fn dim(&self) -> usize {
        3
    }

    fn logp_grad(&self, beta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let v2 = self.prior_sd * self.prior_sd;
        let mut lp = 0.0;
        for k in 0..3 {
            lp -= 0.5 * beta[k] * beta[k] / v2;
            grad[k] = -beta[k] / v2;
        }
        for (i, xi) in self.x.iter().enumerate() {
            let eta = self.eta(i, beta);
            lp += bernoulli_logit_lpmf(self.y[i], eta);
            let r = self.y[i] as f64 - 1.0 / (1.0 + (-eta).exp());
            for k in 0..3 {
                grad[k] += r * xi[k];
            }
        }
        Some(lp)
    }

    fn pointwise(&self, beta: &[f64]) -> Option<Vec<f64>> {
        Some((0..self.y.len()).map(|i| bernoulli_logit_lpmf(self.y[i], self.eta(i, beta))).collect())
    }
}

/// Simulated data for [`Logistic3`]: an intercept and two standard normal covariates.
pub fn logistic3_data(n: usize, beta: &[f64; 3], seed: u64) -> Logistic3 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let row = [1.0, a, b];
        let eta: f64 = row.iter().zip(beta).map(|(u, v)| u * v).sum();
        y.push(multimorb::simulator::draw_bernoulli_logit(eta, &mut rng));
        x.push(row);
    }
    Logistic3 { x, y, prior_sd: 1.0 }
}

pub fn sampler_config(chains: usize, warmup: usize, sampling: usize, seed: u64) -> multimorb::config::SamplerConfig {
    multimorb::config::SamplerConfig { chains, warmup, sampling, seed, ..Default::default() }
}

/// A randomized location table, kernel parameters and mixture weights.
pub struct KernelCase {
    pub table: multimorb::data::LocationTable,
    pub params: multimorb::kernels::KernelParams,
    pub specs: Vec<multimorb::config::KernelSpec>,
    pub weights: Vec<f64>,
}

/// Draws a kernel configuration. Distance matrices are Euclidean on random
/// features, or arbitrary non-negative symmetric matrices when `metric` is false.
pub fn random_kernel_case(seed: u64, metric: bool) -> KernelCase {
    use multimorb::config::KernelSpec;
    use multimorb::linalg::Matrix;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=14usize);
    let regions = rng.random_range(1..=n.min(4));
    let region_of: Vec<Option<usize>> = (0..n).map(|l| Some(l * regions / n)).collect();
    let mut adj = vec![Vec::new(); n];
    for a in 0..n {
        for b in 0..a {
            if rng.random_bool(0.3) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    for a in 0..n {
        if adj[a].is_empty() {
            let b = (a + 1) % n;
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let num_dist = rng.random_range(0..=2usize);
    let distances: Vec<Matrix> = (0..num_dist)
        .map(|_| {
            if metric {
                let f: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]).collect();
                Matrix::from_fn(n, |i, j| ((f[i][0] - f[j][0]).powi(2) + (f[i][1] - f[j][1]).powi(2)).sqrt())
            } else {
                let mut d = Matrix::zeros(n);
                for i in 0..n {
                    for j in 0..i {
                        let v = rng.random_range(0.0..0.3);
                        d[(i, j)] = v;
                        d[(j, i)] = v;
                    }
                }
                d
            }
        })
        .collect();
    let table = multimorb::data::LocationTable::new(region_of, adj, distances).unwrap();
    let params = multimorb::kernels::KernelParams {
        theta_region: (0..regions).map(|_| rng.random_range(0.01..0.99)).collect(),
        theta_contiguity: rng.random_range(0.01..0.99),
    };
    let mut specs = vec![KernelSpec::Partition, KernelSpec::Contiguity];
    specs.extend((0..num_dist).map(KernelSpec::Distance));
    let raw: Vec<f64> = specs.iter().map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    KernelCase { table, params, specs, weights }
}

//! No-U-Turn sampler with multinomial trajectory sampling, windowed warmup
//! adaptation of the step size and a diagonal metric, and multi-chain runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MetricKind, SamplerConfig};
use crate::diagnostics::{summarize, ParamDiagnostics};
use crate::error::SamplerError;
use crate::linalg::log_add_exp;
use crate::model::PosteriorTarget;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density with its gradient written into `grad`; `None` rejects the point.
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> Option<f64>;

    /// Pointwise log-likelihood recorded with each retained draw.
    fn pointwise(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl LogDensity for PosteriorTarget {
    fn dim(&self) -> usize {
        PosteriorTarget::dim(self)
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        let e = self.evaluate(x).ok()?;
        grad.copy_from_slice(&e.gradient);
        Some(e.value)
    }

    fn pointwise(&self, x: &[f64]) -> Option<Vec<f64>> {
        PosteriorTarget::pointwise(self, x).ok()
    }
}

/// Position, momentum and cached density.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Option<Self> {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad)?;
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let p = vec![0.0; q.len()];
        Some(Self { q, p, logp, grad })
    }

    /// `-log p(q) + p' M^-1 p / 2`.
    pub fn hamiltonian(&self, inv_metric: &[f64]) -> f64 {
        let kinetic: f64 = self.p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
        -self.logp + kinetic
    }
}

/// One leapfrog step of signed size `eps`. A rejected density leaves
/// `logp = -inf` so that the step registers as divergent.
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut PhasePoint, inv_metric: &[f64], eps: f64) {
    let half = 0.5 * eps;
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += half * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += eps * m * p;
    }
    match target.logp_grad(&z.q, &mut z.grad) {
        Some(lp) if lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => {
            z.logp = lp;
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * g;
            }
        }
        _ => {
            z.logp = f64::NEG_INFINITY;
            z.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

fn sharp(p: &[f64], inv_metric: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_metric).map(|(a, b)| a * b).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub lp: f64,
    pub accept_stat: f64,
    pub step_size: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

struct TreeCtx<'a, T: ?Sized> {
    target: &'a T,
    inv_metric: &'a [f64],
    eps: f64,
    h0: f64,
    max_energy_error: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Edge {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
}

impl<T: LogDensity + ?Sized> TreeCtx<'_, T> {
    /// Extends `z` by `2^depth` steps; returns the subtree's proposal, its
    /// boundary momenta, and whether it is free of U-turns and divergences.
    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng + ?Sized>(
        &mut self,
        z: &mut PhasePoint,
        depth: usize,
        sign: f64,
        rho: &mut [f64],
        log_sum_weight: &mut f64,
        rng: &mut R,
    ) -> (Option<PhasePoint>, Option<Edge>) {
        if depth == 0 {
            leapfrog(self.target, z, self.inv_metric, sign * self.eps);
            self.n_leapfrog += 1;
            let mut h = z.hamiltonian(self.inv_metric);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - self.h0 > self.max_energy_error {
                self.divergent = true;
            }
            *log_sum_weight = log_add_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            let ps = sharp(&z.p, self.inv_metric);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            let edge = Edge { p_sharp_beg: ps.clone(), p_sharp_end: ps, p_beg: z.p.clone(), p_end: z.p.clone() };
            return if self.divergent { (None, None) } else { (Some(z.clone()), Some(edge)) };
        }
        let n = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut rho_init = vec![0.0; n];
        let (Some(prop_init), Some(edge_init)) = self.build(z, depth - 1, sign, &mut rho_init, &mut lsw_init, rng) else {
            return (None, None);
        };
        let mut lsw_final = f64::NEG_INFINITY;
        let mut rho_final = vec![0.0; n];
        let (Some(prop_final), Some(edge_final)) = self.build(z, depth - 1, sign, &mut rho_final, &mut lsw_final, rng)
        else {
            return (None, None);
        };
        let lsw_subtree = log_add_exp(lsw_init, lsw_final);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        let take_final = lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp();
        let proposal = if take_final { prop_final } else { prop_init };

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(&edge_init.p_sharp_beg, &edge_final.p_sharp_end, &rho_subtree);
        persist &= no_u_turn(&edge_init.p_sharp_beg, &edge_final.p_sharp_beg, &add(&rho_init, &edge_final.p_beg));
        persist &= no_u_turn(&edge_init.p_sharp_end, &edge_final.p_sharp_end, &add(&rho_final, &edge_init.p_end));
        let edge = Edge {
            p_sharp_beg: edge_init.p_sharp_beg,
            p_sharp_end: edge_final.p_sharp_end,
            p_beg: edge_init.p_beg,
            p_end: edge_final.p_end,
        };
        if persist {
            (Some(proposal), Some(edge))
        } else {
            (Some(proposal), None)
        }
    }
}

/// Sampler settings that stay fixed within a transition.
#[derive(Debug, Clone, Copy)]
pub struct NutsSettings {
    pub max_depth: usize,
    pub max_energy_error: f64,
}

/// One NUTS transition from `init` (momentum is resampled).
pub fn nuts_transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    init: &PhasePoint,
    rng: &mut R,
    eps: f64,
    inv_metric: &[f64],
    settings: NutsSettings,
) -> (PhasePoint, TransitionStats) {
    let n = init.q.len();
    let mut z0 = init.clone();
    for (p, m) in z0.p.iter_mut().zip(inv_metric) {
        let e: f64 = rng.sample(StandardNormal);
        *p = e / m.sqrt();
    }
    let h0 = z0.hamiltonian(inv_metric);
    let mut z_fwd = z0.clone();
    let mut z_bck = z0.clone();
    let mut z_sample = z0.clone();

    let ps0 = sharp(&z0.p, inv_metric);
    let mut p_sharp_fwd_fwd = ps0.clone();
    let mut p_sharp_fwd_bck = ps0.clone();
    let mut p_sharp_bck_fwd = ps0.clone();
    let mut p_sharp_bck_bck = ps0;
    let mut p_fwd_bck = z0.p.clone();
    let mut p_bck_fwd = z0.p.clone();
    let mut rho = z0.p.clone();

    let mut ctx = TreeCtx {
        target,
        inv_metric,
        eps,
        h0,
        max_energy_error: settings.max_energy_error,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    let mut log_sum_weight = 0.0;
    let mut depth = 0;
    while depth < settings.max_depth {
        let mut rho_fwd = vec![0.0; n];
        let mut rho_bck = vec![0.0; n];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let forward = rng.random::<f64>() > 0.5;
        let (proposal, edge) = if forward {
            rho_bck.copy_from_slice(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let r = ctx.build(&mut z_fwd, depth, 1.0, &mut rho_fwd, &mut lsw_subtree, rng);
            if let Some(e) = &r.1 {
                p_sharp_fwd_bck.clone_from(&e.p_sharp_beg);
                p_sharp_fwd_fwd.clone_from(&e.p_sharp_end);
                p_fwd_bck.clone_from(&e.p_beg);
            }
            r
        } else {
            rho_fwd.copy_from_slice(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            let r = ctx.build(&mut z_bck, depth, -1.0, &mut rho_bck, &mut lsw_subtree, rng);
            if let Some(e) = &r.1 {
                p_sharp_bck_fwd.clone_from(&e.p_sharp_beg);
                p_sharp_bck_bck.clone_from(&e.p_sharp_end);
                p_bck_fwd.clone_from(&e.p_beg);
            }
            r
        };
        let (Some(proposal), Some(_)) = (proposal, edge) else {
            break;
        };
        depth += 1;
        if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
            z_sample = proposal;
        }
        log_sum_weight = log_add_exp(log_sum_weight, lsw_subtree);
        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &add(&rho_bck, &p_fwd_bck));
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
        if !persist {
            break;
        }
    }
    let accept_stat = if ctx.n_leapfrog > 0 { ctx.sum_metro_prob / ctx.n_leapfrog as f64 } else { 0.0 };
    let energy = z_sample.hamiltonian(inv_metric);
    let stats = TransitionStats {
        lp: z_sample.logp,
        accept_stat,
        step_size: eps,
        tree_depth: depth,
        n_leapfrog: ctx.n_leapfrog,
        divergent: ctx.divergent,
        energy,
    };
    (z_sample, stats)
}

/// Dual-averaging step size adaptation.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub mu: f64,
    pub delta: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(step: f64, delta: f64) -> Self {
        Self { mu: (10.0 * step).ln(), delta, gamma: 0.05, t0: 10.0, kappa: 0.75, counter: 0.0, s_bar: 0.0, x_bar: 0.0 }
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup windows for metric adaptation.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
}

impl WindowSchedule {
    pub const INIT_BUFFER: usize = 75;
    pub const TERM_BUFFER: usize = 50;
    pub const BASE_WINDOW: usize = 25;

    /// `None` when the warmup is too short for windowed metric adaptation.
    pub fn new(num_warmup: usize) -> Option<Self> {
        if num_warmup < Self::INIT_BUFFER + Self::TERM_BUFFER + Self::BASE_WINDOW {
            return None;
        }
        Some(Self {
            num_warmup,
            init_buffer: Self::INIT_BUFFER,
            term_buffer: Self::TERM_BUFFER,
            window_size: Self::BASE_WINDOW,
            next_window: Self::INIT_BUFFER + Self::BASE_WINDOW - 1,
            counter: 0,
        })
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn window_end(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn advance_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Iterations (0-based) at which a metric update happens.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut s = self.clone();
        let mut out = Vec::new();
        while s.counter < s.num_warmup {
            if s.window_end() {
                out.push(s.counter);
                s.advance_window();
            }
            s.counter += 1;
        }
        out
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Variance shrunk towards `1e-3` with weight `5 / (n + 5)`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2.iter().map(|s| (n / (n + 5.0)) * (s / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0))).collect()
    }
}

/// Heuristic from Stan: double or halve until one-step acceptance crosses 0.8.
fn init_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    z: &PhasePoint,
    inv_metric: &[f64],
    mut eps: f64,
    rng: &mut R,
) -> f64 {
    if eps == 0.0 || eps > 1e7 || eps.is_nan() {
        return eps;
    }
    let trial = |eps: f64, rng: &mut R| -> f64 {
        let mut w = z.clone();
        for (p, m) in w.p.iter_mut().zip(inv_metric) {
            let e: f64 = rng.sample(StandardNormal);
            *p = e / m.sqrt();
        }
        let h0 = w.hamiltonian(inv_metric);
        leapfrog(target, &mut w, inv_metric, eps);
        let mut h = w.hamiltonian(inv_metric);
        if h.is_nan() {
            h = f64::INFINITY;
        }
        h0 - h
    };
    let threshold = 0.8f64.ln();
    let direction = if trial(eps, rng) > threshold { 1 } else { -1 };
    for _ in 0..100 {
        let dh = trial(eps, rng);
        if direction == 1 && !(dh > threshold) || direction == -1 && !(dh < threshold) {
            break;
        }
        if direction == 1 {
            eps *= 2.0;
        } else {
            eps /= 2.0;
        }
        if !(1e-300..=1e7).contains(&eps) {
            break;
        }
    }
    eps
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain: usize,
    pub init: Vec<f64>,
    /// `sampling x dim`.
    pub draws: Vec<Vec<f64>>,
    /// `sampling x points`, empty when the target has no pointwise likelihood.
    pub pointwise: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub warmup_stats: Vec<TransitionStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn warmup_divergences(&self) -> usize {
        self.warmup_stats.iter().filter(|s| s.divergent).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        crate::linalg::mean(&self.stats.iter().map(|s| s.accept_stat).collect::<Vec<_>>())
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }
}

/// Draws and diagnostics of a multi-chain run, ordered by chain index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMatrix {
    pub chains: Vec<ChainOutput>,
    pub diagnostics: Vec<ParamDiagnostics>,
}

impl DrawMatrix {
    pub fn dim(&self) -> usize {
        self.chains.first().map(|c| c.inv_metric.len()).unwrap_or(0)
    }

    pub fn column(&self, i: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.column(i)).collect()
    }

    /// All retained draws of coordinate `i`, chain after chain.
    pub fn pooled(&self, i: usize) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.column(i)).collect()
    }

    /// Stacked pointwise log-likelihood, `(chains * sampling) x points`.
    pub fn pointwise(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.pointwise.iter().cloned()).collect()
    }

    pub fn total_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences()).sum()
    }

    pub fn total_iterations(&self) -> usize {
        self.chains.iter().map(|c| c.stats.len()).sum()
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.diagnostics.iter().filter_map(|d| d.rhat).reduce(f64::max)
    }
}

/// Runs one chain: initial point search, warmup with adaptation, sampling.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    chain: usize,
    record_pointwise: bool,
) -> Result<ChainOutput, SamplerError> {
    let dim = target.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let settings = NutsSettings { max_depth: cfg.max_tree_depth, max_energy_error: cfg.max_energy_error };

    let mut z = None;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim)
            .map(|_| if cfg.init_radius > 0.0 { rng.random_range(-cfg.init_radius..=cfg.init_radius) } else { 0.0 })
            .collect();
        if let Some(p) = PhasePoint::new(target, q) {
            z = Some(p);
            break;
        }
    }
    let mut z = z.ok_or(SamplerError::NonFiniteDensity(chain))?;
    let init = z.q.clone();

    let mut inv_metric = vec![1.0; dim];
    let mut eps = cfg.step_size;
    let mut warmup_stats = Vec::with_capacity(cfg.warmup);
    if cfg.warmup > 0 {
        eps = init_step_size(target, &z, &inv_metric, eps, &mut rng);
        let mut da = DualAveraging::new(eps, cfg.target_accept);
        let mut schedule = if cfg.metric == MetricKind::Diagonal { WindowSchedule::new(cfg.warmup) } else { None };
        let mut welford = Welford::new(dim);
        for _ in 0..cfg.warmup {
            let (next, stats) = nuts_transition(target, &z, &mut rng, eps, &inv_metric, settings);
            z = next;
            warmup_stats.push(stats);
            eps = da.learn(stats.accept_stat);
            if let Some(s) = schedule.as_mut() {
                if s.in_window() {
                    welford.add(&z.q);
                }
                if s.window_end() {
                    s.advance_window();
                    inv_metric = welford.regularized();
                    welford = Welford::new(dim);
                    s.counter += 1;
                    eps = init_step_size(target, &z, &inv_metric, eps, &mut rng);
                    da.restart(eps);
                    continue;
                }
                s.counter += 1;
            }
        }
        eps = da.final_step();
    }

    let mut draws = Vec::with_capacity(cfg.sampling);
    let mut pointwise = Vec::new();
    let mut stats = Vec::with_capacity(cfg.sampling);
    for _ in 0..cfg.sampling {
        let (next, st) = nuts_transition(target, &z, &mut rng, eps, &inv_metric, settings);
        z = next;
        stats.push(st);
        draws.push(z.q.clone());
        if record_pointwise {
            if let Some(pw) = target.pointwise(&z.q) {
                pointwise.push(pw);
            }
        }
    }
    Ok(ChainOutput { chain, init, draws, pointwise, stats, warmup_stats, step_size: eps, inv_metric })
}

/// Worker threads for chain-level parallelism: `MULTIMORB_THREADS` if set.
pub fn thread_count() -> Option<usize> {
    std::env::var("MULTIMORB_THREADS").ok().and_then(|v| v.parse().ok()).filter(|n| *n > 0)
}

/// Runs all chains in parallel and computes per-parameter diagnostics.
pub fn run<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig) -> Result<DrawMatrix, SamplerError> {
    cfg.validate().map_err(SamplerError::InvalidConfig)?;
    let work = || -> Vec<Result<ChainOutput, SamplerError>> {
        (0..cfg.chains).into_par_iter().map(|c| run_chain(target, cfg, c, true)).collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };
    let chains = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if chains.iter().all(|c| 2 * c.divergences() > c.stats.len()) {
        return Err(SamplerError::AllChainsDiverged);
    }
    let diagnostics = diagnose(&chains)?;
    Ok(DrawMatrix { chains, diagnostics })
}

/// Per-coordinate diagnostics over chains. Too few draws yields an empty list.
pub fn diagnose(chains: &[ChainOutput]) -> Result<Vec<ParamDiagnostics>, SamplerError> {
    let dim = chains.first().map(|c| c.inv_metric.len()).unwrap_or(0);
    let n = chains.first().map(|c| c.draws.len()).unwrap_or(0);
    if n < 8 {
        return Ok(Vec::new());
    }
    (0..dim)
        .into_par_iter()
        .map(|i| {
            let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(i)).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            summarize(&refs)
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::{mean, sample_variance};

    /// Zero-mean Gaussian with precision matrix `prec` (dense).
    pub(crate) struct Gaussian {
        pub mean: Vec<f64>,
        pub prec: Vec<Vec<f64>>,
    }

    impl Gaussian {
        pub fn diagonal(vars: &[f64]) -> Self {
            let n = vars.len();
            let prec = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 / vars[i] } else { 0.0 }).collect()).collect();
            Self { mean: vec![0.0; n], prec }
        }

        pub fn correlated(rho: f64) -> Self {
            let det = 1.0 - rho * rho;
            Self { mean: vec![0.0, 0.0], prec: vec![vec![1.0 / det, -rho / det], vec![-rho / det, 1.0 / det]] }
        }
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
            let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            let mut lp = 0.0;
            for i in 0..d.len() {
                let row: f64 = self.prec[i].iter().zip(&d).map(|(p, v)| p * v).sum();
                grad[i] = -row;
                lp -= 0.5 * d[i] * row;
            }
            Some(lp)
        }
    }

    fn cfg(warmup: usize, sampling: usize, chains: usize, seed: u64) -> SamplerConfig {
        SamplerConfig { warmup, sampling, chains, seed, ..SamplerConfig::default() }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let g = Gaussian::correlated(0.7);
        let inv = [1.0, 2.0];
        let mut z = PhasePoint::new(&g, vec![0.3, -1.1]).unwrap();
        z.p = vec![0.4, 0.9];
        let start = z.clone();
        for _ in 0..25 {
            leapfrog(&g, &mut z, &inv, 0.1);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..25 {
            leapfrog(&g, &mut z, &inv, 0.1);
        }
        for i in 0..2 {
            assert!((z.q[i] - start.q[i]).abs() < 1e-8);
            assert!((z.p[i] + start.p[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let g = Gaussian::diagonal(&[1.0, 4.0]);
        let inv = [1.0, 1.0];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..6 {
            let eps = 0.2 / 2f64.powi(k);
            let steps = (1.0 / eps).round() as usize;
            let mut z = PhasePoint::new(&g, vec![1.0, 0.5]).unwrap();
            z.p = vec![0.3, -0.8];
            let h0 = z.hamiltonian(&inv);
            let mut err: f64 = 0.0;
            for _ in 0..steps {
                leapfrog(&g, &mut z, &inv, eps);
                err = err.max((z.hamiltonian(&inv) - h0).abs());
            }
            xs.push(eps.ln());
            ys.push(err.ln());
        }
        let (mx, my) = (mean(&xs), mean(&ys));
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((1.8..=2.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn window_boundaries_follow_doubling_scheme() {
        let s = WindowSchedule::new(1000).unwrap();
        assert_eq!(s.boundaries(), vec![99, 149, 249, 449, 949]);
        assert!(WindowSchedule::new(149).is_none());
        assert_eq!(WindowSchedule::new(150).unwrap().boundaries(), vec![99]);
    }

    #[test]
    fn standard_normal_moments() {
        let g = Gaussian::diagonal(&[1.0]);
        let c = cfg(1000, 10_000, 1, 1);
        let out = run_chain(&g, &c, 0, false).unwrap();
        let x = out.column(0);
        let ess = crate::diagnostics::ess_mean(&[&x]).unwrap().unwrap();
        let se = (sample_variance(&x) / ess).sqrt();
        assert!(mean(&x).abs() < 4.0 * se, "mean {} se {se}", mean(&x));
        assert!((sample_variance(&x) - 1.0).abs() < 0.1);
        assert!(out.divergences() <= 10);
    }

    #[test]
    fn acceptance_statistic_tracks_target() {
        let vars: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.5).collect();
        let g = Gaussian::diagonal(&vars);
        let out = run_chain(&g, &cfg(1000, 1000, 1, 5), 0, false).unwrap();
        assert!((out.mean_accept_stat() - 0.8).abs() < 0.1, "accept {}", out.mean_accept_stat());
    }

    #[test]
    fn correlated_gaussian_marginals() {
        let g = Gaussian::correlated(0.9);
        let m = run(&g, &cfg(1000, 2500, 4, 2)).unwrap();
        for i in 0..2 {
            let x = m.pooled(i);
            assert!((sample_variance(&x) - 1.0).abs() < 0.1, "var {}", sample_variance(&x));
            let d = &m.diagnostics[i];
            assert!(d.mean.abs() < 4.0 * d.mcse_mean.unwrap());
        }
        assert!(m.max_rhat().unwrap() < 1.01);
        assert!(m.total_divergences() * 1000 <= m.total_iterations());
    }

    #[test]
    fn metric_adapts_to_scales() {
        let g = Gaussian::diagonal(&[1.0, 100.0]);
        let out = run_chain(&g, &cfg(1000, 200, 1, 3), 0, false).unwrap();
        let ratio = out.inv_metric[1] / out.inv_metric[0];
        assert!(ratio > 100.0 / 3.0 && ratio < 300.0, "ratio {ratio}");
        assert!(out.step_size > 0.0 && out.step_size.is_finite());
    }

    #[test]
    fn short_warmup_adapts_step_only() {
        let g = Gaussian::diagonal(&[1.0, 100.0]);
        let out = run_chain(&g, &cfg(100, 50, 1, 4), 0, false).unwrap();
        assert_eq!(out.inv_metric, vec![1.0, 1.0]);
        assert!(out.step_size > 0.0 && out.step_size.is_finite());
    }

    #[test]
    fn same_seed_same_draws() {
        let g = Gaussian::correlated(0.5);
        let a = run(&g, &cfg(200, 100, 3, 9)).unwrap();
        let b = run(&g, &cfg(200, 100, 3, 9)).unwrap();
        assert_eq!(a, b);
        let c = run(&g, &cfg(200, 100, 3, 10)).unwrap();
        assert_ne!(a.chains[0].draws, c.chains[0].draws);
        assert_ne!(a.chains[0].draws, a.chains[1].draws);
    }

    #[test]
    fn zero_step_size_is_rejected() {
        let g = Gaussian::diagonal(&[1.0]);
        let c = SamplerConfig { step_size: 0.0, ..cfg(10, 10, 1, 0) };
        assert!(matches!(run(&g, &c), Err(SamplerError::InvalidConfig(_))));
    }

    struct Nowhere;
    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            2
        }
        fn logp_grad(&self, _x: &[f64], _g: &mut [f64]) -> Option<f64> {
            None
        }
    }

    #[test]
    fn non_finite_initial_density() {
        assert!(matches!(run_chain(&Nowhere, &cfg(10, 10, 1, 0), 0, false), Err(SamplerError::NonFiniteDensity(0))));
    }

    /// Finite only inside the unit box: big steps diverge.
    struct Boxed;
    impl LogDensity for Boxed {
        fn dim(&self) -> usize {
            1
        }
        fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            if x[0].abs() > 1.0 {
                return None;
            }
            g[0] = 0.0;
            Some(0.0)
        }
    }

    #[test]
    fn divergent_transitions_stay_in_support() {
        let c = SamplerConfig { step_size: 5.0, init_radius: 0.5, ..cfg(0, 200, 1, 0) };
        let out = run_chain(&Boxed, &c, 0, false).unwrap();
        assert!(out.divergences() > 0);
        assert!(out.draws.iter().all(|d| d[0].abs() <= 1.0));
        assert!(matches!(run(&Boxed, &SamplerConfig { chains: 2, ..c }), Err(SamplerError::AllChainsDiverged)));
    }
}

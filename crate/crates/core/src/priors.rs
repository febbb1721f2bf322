//! Prior densities, constraint transforms and prior simulation.
//!
//! Transforms: `log` for positive quantities (with `log(lambda^2)` for the
//! local scales), log-odds for (0, 1) parameters and an additive log-ratio
//! map for each simplex, the last component acting as reference.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::config::Hyperparameters;
use crate::error::ModelError;
use crate::params::{ParamLayout, ParameterState};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
fn std_normal_lpdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

#[inline]
fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

#[inline]
fn beta_lpdf(x: f64, a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
}

#[inline]
fn logistic(u: f64) -> f64 {
    crate::coefficients::inverse_logit(u)
}

/// `(ln sigma(u), ln(1 - sigma(u)))` without cancellation.
#[inline]
fn log_logistic_pair(u: f64) -> (f64, f64) {
    let a = -crate::linalg::log1p_exp(-u);
    let b = -crate::linalg::log1p_exp(u);
    (a, b)
}

/// Softmax over `(u_1, ..., u_{K-1}, 0)`.
fn alr_inverse(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(0.0f64, f64::max);
    let mut w: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    w.push((-m).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn check_finite(x: &[f64]) -> Result<(), ModelError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::ConstraintViolation(format!("unconstrained coordinate {i} is not finite"))),
        None => Ok(()),
    }
}

pub fn from_unconstrained(layout: &ParamLayout, x: &[f64]) -> Result<ParameterState, ModelError> {
    if x.len() != layout.dim {
        return Err(ModelError::Dimension { expected: layout.dim, got: x.len() });
    }
    check_finite(x)?;
    let d = &layout.dims;
    let mut s = ParameterState::neutral(d);
    s.phi.copy_from_slice(&x[layout.phi.clone()]);
    s.psi.copy_from_slice(&x[layout.psi.clone()]);
    for (dst, u) in s.delta.iter_mut().zip(&x[layout.log_delta.clone()]) {
        *dst = u.exp();
    }
    if let Some(r) = &layout.log_lambda0_sq {
        for (dst, u) in s.lambda0.iter_mut().zip(&x[r.clone()]) {
            *dst = (0.5 * u).exp();
        }
    }
    if let Some(r) = &layout.log_lambda1_sq {
        for (dst, u) in s.lambda1.iter_mut().zip(&x[r.clone()]) {
            *dst = (0.5 * u).exp();
        }
    }
    if let Some(r) = &layout.logit_theta_region {
        for (dst, u) in s.theta_region.iter_mut().zip(&x[r.clone()]) {
            *dst = logistic(*u);
        }
    }
    if let Some(i) = layout.logit_theta_contiguity {
        s.theta_contiguity = logistic(x[i]);
    }
    if let Some(r) = &layout.alr_omega {
        let km1 = d.num_kernels() - 1;
        for (slot, chunk) in s.omega.iter_mut().zip(x[r.clone()].chunks(km1)) {
            *slot = alr_inverse(chunk);
        }
    }
    if let Some(i) = layout.log_alpha_lambda0 {
        s.alpha_lambda[0] = x[i].exp();
    }
    if let Some(i) = layout.log_alpha_lambda1 {
        s.alpha_lambda[1] = x[i].exp();
    }
    s.gamma[0] = x[layout.log_gamma1].exp();
    s.gamma[1..].copy_from_slice(&x[layout.gamma_rest.clone()]);
    if let Some(r) = &layout.z0 {
        s.z0.copy_from_slice(&x[r.clone()]);
    }
    if let Some(r) = &layout.z1 {
        s.z1.copy_from_slice(&x[r.clone()]);
    }
    s.epsilon.copy_from_slice(&x[layout.epsilon.clone()]);
    Ok(s)
}

pub fn to_unconstrained(layout: &ParamLayout, s: &ParameterState) -> Vec<f64> {
    let d = &layout.dims;
    let mut x = vec![0.0; layout.dim];
    x[layout.phi.clone()].copy_from_slice(&s.phi);
    x[layout.psi.clone()].copy_from_slice(&s.psi);
    for (dst, v) in x[layout.log_delta.clone()].iter_mut().zip(&s.delta) {
        *dst = v.ln();
    }
    if let Some(r) = &layout.log_lambda0_sq {
        for (dst, v) in x[r.clone()].iter_mut().zip(&s.lambda0) {
            *dst = 2.0 * v.ln();
        }
    }
    if let Some(r) = &layout.log_lambda1_sq {
        for (dst, v) in x[r.clone()].iter_mut().zip(&s.lambda1) {
            *dst = 2.0 * v.ln();
        }
    }
    let logit = |p: f64| p.ln() - (-p).ln_1p();
    if let Some(r) = &layout.logit_theta_region {
        for (dst, v) in x[r.clone()].iter_mut().zip(&s.theta_region) {
            *dst = logit(*v);
        }
    }
    if let Some(i) = layout.logit_theta_contiguity {
        x[i] = logit(s.theta_contiguity);
    }
    if let Some(r) = &layout.alr_omega {
        let km1 = d.num_kernels() - 1;
        for (w, chunk) in s.omega.iter().zip(x[r.clone()].chunks_mut(km1)) {
            let last = w[km1].ln();
            for (dst, wm) in chunk.iter_mut().zip(w) {
                *dst = wm.ln() - last;
            }
        }
    }
    if let Some(i) = layout.log_alpha_lambda0 {
        x[i] = s.alpha_lambda[0].ln();
    }
    if let Some(i) = layout.log_alpha_lambda1 {
        x[i] = s.alpha_lambda[1].ln();
    }
    x[layout.log_gamma1] = s.gamma[0].ln();
    x[layout.gamma_rest.clone()].copy_from_slice(&s.gamma[1..]);
    if let Some(r) = &layout.z0 {
        x[r.clone()].copy_from_slice(&s.z0);
    }
    if let Some(r) = &layout.z1 {
        x[r.clone()].copy_from_slice(&s.z1);
    }
    x[layout.epsilon.clone()].copy_from_slice(&s.epsilon);
    x
}

fn lambda_rate(hyper: &Hyperparameters, alpha: f64, num_predictors: usize) -> f64 {
    alpha / (hyper.sigma2_zeta * hyper.rho(num_predictors))
}

/// Log prior density of a constrained state (no Jacobian terms). The local
/// scale prior is a density over `lambda^2`.
pub fn log_prior(layout: &ParamLayout, hyper: &Hyperparameters, s: &ParameterState) -> Result<f64, ModelError> {
    let d = &layout.dims;
    let violation = |what: &str| Err(ModelError::ConstraintViolation(what.into()));
    let mut lp = 0.0;
    lp += s.phi.iter().chain(&s.psi).map(|&v| std_normal_lpdf(v)).sum::<f64>();
    for &dl in &s.delta {
        if !(dl > 0.0) {
            return violation("delta must be positive");
        }
        lp += gamma_lpdf(dl, hyper.a_delta, hyper.b_delta);
    }
    let scale_blocks = [
        (layout.log_lambda0_sq.is_some(), &s.lambda0, s.alpha_lambda[0]),
        (layout.log_lambda1_sq.is_some(), &s.lambda1, s.alpha_lambda[1]),
    ];
    for (present, lam, alpha) in scale_blocks {
        if !present {
            continue;
        }
        if !(alpha > 0.0) {
            return violation("alpha_lambda must be positive");
        }
        lp += -alpha;
        let rate = lambda_rate(hyper, alpha, d.num_predictors);
        for &v in lam.iter() {
            if !(v > 0.0) {
                return violation("lambda must be positive");
            }
            lp += gamma_lpdf(v * v, alpha, rate);
        }
    }
    if layout.logit_theta_region.is_some() {
        for &t in &s.theta_region {
            if !(t > 0.0 && t < 1.0) {
                return violation("theta_region must lie in (0, 1)");
            }
            lp += beta_lpdf(t, hyper.beta_a, hyper.beta_b);
        }
    }
    if layout.logit_theta_contiguity.is_some() {
        let t = s.theta_contiguity;
        if !(t > 0.0 && t < 1.0) {
            return violation("theta_contiguity must lie in (0, 1)");
        }
        lp += beta_lpdf(t, hyper.beta_a, hyper.beta_b);
    }
    if layout.alr_omega.is_some() {
        let k = d.num_kernels() as f64;
        let a = hyper.a_omega;
        for w in &s.omega {
            let total: f64 = w.iter().sum();
            if w.iter().any(|&v| !(v > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return violation("omega must lie on the open simplex");
            }
            lp += ln_gamma(k * a) - k * ln_gamma(a) + (a - 1.0) * w.iter().map(|v| v.ln()).sum::<f64>();
        }
    }
    let g1 = s.gamma[0];
    if !(g1 > 0.0) {
        return violation("gamma[0] must be positive");
    }
    let sc = hyper.gamma1_scale;
    lp += std::f64::consts::LN_2 - LN_SQRT_2PI - sc.ln() - 0.5 * (g1 / sc).powi(2);
    lp += s.gamma[1..].iter().map(|&v| std_normal_lpdf(v)).sum::<f64>();
    if layout.z0.is_some() {
        lp += s.z0.iter().map(|&v| std_normal_lpdf(v)).sum::<f64>();
    }
    if layout.z1.is_some() {
        lp += s.z1.iter().map(|&v| std_normal_lpdf(v)).sum::<f64>();
    }
    lp += s.epsilon.iter().map(|&v| std_normal_lpdf(v)).sum::<f64>();
    Ok(lp)
}

/// Log prior plus log-Jacobian on the unconstrained vector, with gradient
/// accumulated into `grad`.
pub fn log_prior_unconstrained_into(
    layout: &ParamLayout,
    hyper: &Hyperparameters,
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let d = &layout.dims;
    let mut lp = 0.0;
    let normal_block = |r: std::ops::Range<usize>, lp: &mut f64, grad: &mut [f64]| {
        for i in r {
            *lp += std_normal_lpdf(x[i]);
            grad[i] -= x[i];
        }
    };
    normal_block(layout.phi.clone(), &mut lp, grad);
    normal_block(layout.psi.clone(), &mut lp, grad);
    normal_block(layout.gamma_rest.clone(), &mut lp, grad);
    if let Some(r) = &layout.z0 {
        normal_block(r.clone(), &mut lp, grad);
    }
    if let Some(r) = &layout.z1 {
        normal_block(r.clone(), &mut lp, grad);
    }
    normal_block(layout.epsilon.clone(), &mut lp, grad);

    let (a, b) = (hyper.a_delta, hyper.b_delta);
    let c_delta = a * b.ln() - ln_gamma(a);
    for i in layout.log_delta.clone() {
        let e = x[i].exp();
        lp += c_delta + a * x[i] - b * e;
        grad[i] += a - b * e;
    }

    let sr = hyper.sigma2_zeta * hyper.rho(d.num_predictors);
    let scale_blocks = [
        (layout.log_lambda0_sq.as_ref(), layout.log_alpha_lambda0),
        (layout.log_lambda1_sq.as_ref(), layout.log_alpha_lambda1),
    ];
    for (range, alpha_idx) in scale_blocks {
        let (Some(range), Some(ai)) = (range, alpha_idx) else { continue };
        let w = x[ai];
        let alpha = w.exp();
        // Exp(1) on alpha, with Jacobian alpha.
        lp += w - alpha;
        let mut g_alpha = -1.0;
        let mut g_w = 1.0;
        let rate = alpha / sr;
        let ln_rate = rate.ln();
        let c = alpha * ln_rate - ln_gamma(alpha);
        let dc = ln_rate + 1.0 - digamma(alpha);
        for i in range.clone() {
            let u = x[i];
            let v = u.exp();
            lp += c + alpha * u - rate * v;
            grad[i] += alpha - rate * v;
            g_alpha += dc + u - v / sr;
        }
        g_w += g_alpha * alpha;
        grad[ai] += g_w;
    }

    let (ba, bb) = (hyper.beta_a, hyper.beta_b);
    let c_beta = ln_gamma(ba + bb) - ln_gamma(ba) - ln_gamma(bb);
    let logit_term = |i: usize, lp: &mut f64, grad: &mut [f64]| {
        let (lt, l1mt) = log_logistic_pair(x[i]);
        let t = logistic(x[i]);
        *lp += c_beta + ba * lt + bb * l1mt;
        grad[i] += ba * (1.0 - t) - bb * t;
    };
    if let Some(r) = &layout.logit_theta_region {
        for i in r.clone() {
            logit_term(i, &mut lp, grad);
        }
    }
    if let Some(i) = layout.logit_theta_contiguity {
        logit_term(i, &mut lp, grad);
    }

    if let Some(r) = &layout.alr_omega {
        let km1 = d.num_kernels() - 1;
        let k = km1 as f64 + 1.0;
        let a = hyper.a_omega;
        let c = ln_gamma(k * a) - k * ln_gamma(a);
        for start in r.clone().step_by(km1) {
            let u = &x[start..start + km1];
            let w = alr_inverse(u);
            lp += c + a * w.iter().map(|v| v.ln()).sum::<f64>();
            for m in 0..km1 {
                grad[start + m] += a - w[m] * k * a;
            }
        }
    }

    let u = x[layout.log_gamma1];
    let sc = hyper.gamma1_scale;
    let g2 = (2.0 * u).exp() / (sc * sc);
    lp += std::f64::consts::LN_2 - LN_SQRT_2PI - sc.ln() - 0.5 * g2 + u;
    grad[layout.log_gamma1] += 1.0 - g2;
    lp
}

pub fn log_prior_unconstrained(layout: &ParamLayout, hyper: &Hyperparameters, x: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; x.len()];
    let v = log_prior_unconstrained_into(layout, hyper, x, &mut grad);
    (v, grad)
}

/// Chain rule from gradients with respect to constrained values (`g`, laid
/// out like a state) to the unconstrained coordinates; accumulates into `grad`.
pub fn pullback(layout: &ParamLayout, s: &ParameterState, g: &ParameterState, grad: &mut [f64]) {
    let d = &layout.dims;
    let add = |grad: &mut [f64], r: std::ops::Range<usize>, src: &[f64]| {
        for (dst, v) in grad[r].iter_mut().zip(src) {
            *dst += v;
        }
    };
    add(grad, layout.phi.clone(), &g.phi);
    add(grad, layout.psi.clone(), &g.psi);
    for ((dst, gv), v) in grad[layout.log_delta.clone()].iter_mut().zip(&g.delta).zip(&s.delta) {
        *dst += gv * v;
    }
    if let Some(r) = &layout.log_lambda0_sq {
        for ((dst, gv), v) in grad[r.clone()].iter_mut().zip(&g.lambda0).zip(&s.lambda0) {
            *dst += 0.5 * gv * v;
        }
    }
    if let Some(r) = &layout.log_lambda1_sq {
        for ((dst, gv), v) in grad[r.clone()].iter_mut().zip(&g.lambda1).zip(&s.lambda1) {
            *dst += 0.5 * gv * v;
        }
    }
    if let Some(r) = &layout.logit_theta_region {
        for ((dst, gv), t) in grad[r.clone()].iter_mut().zip(&g.theta_region).zip(&s.theta_region) {
            *dst += gv * t * (1.0 - t);
        }
    }
    if let Some(i) = layout.logit_theta_contiguity {
        let t = s.theta_contiguity;
        grad[i] += g.theta_contiguity * t * (1.0 - t);
    }
    if let Some(r) = &layout.alr_omega {
        let km1 = d.num_kernels() - 1;
        for (idx, start) in r.clone().step_by(km1).enumerate() {
            let w = &s.omega[idx];
            let gw = &g.omega[idx];
            let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
            for m in 0..km1 {
                grad[start + m] += w[m] * (gw[m] - dot);
            }
        }
    }
    if let Some(i) = layout.log_alpha_lambda0 {
        grad[i] += g.alpha_lambda[0] * s.alpha_lambda[0];
    }
    if let Some(i) = layout.log_alpha_lambda1 {
        grad[i] += g.alpha_lambda[1] * s.alpha_lambda[1];
    }
    grad[layout.log_gamma1] += g.gamma[0] * s.gamma[0];
    add(grad, layout.gamma_rest.clone(), &g.gamma[1..]);
    if let Some(r) = &layout.z0 {
        add(grad, r.clone(), &g.z0);
    }
    if let Some(r) = &layout.z1 {
        add(grad, r.clone(), &g.z1);
    }
    add(grad, layout.epsilon.clone(), &g.epsilon);
}

/// A state with every entry zeroed, used to accumulate gradients.
pub fn zero_state(layout: &ParamLayout) -> ParameterState {
    let mut s = ParameterState::neutral(&layout.dims);
    let zero = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = 0.0);
    zero(&mut s.phi);
    zero(&mut s.psi);
    zero(&mut s.delta);
    zero(&mut s.lambda0);
    zero(&mut s.lambda1);
    zero(&mut s.theta_region);
    s.theta_contiguity = 0.0;
    s.omega.iter_mut().for_each(zero);
    s.alpha_lambda = [0.0, 0.0];
    zero(&mut s.gamma);
    zero(&mut s.z0);
    zero(&mut s.z1);
    zero(&mut s.epsilon);
    s
}

/// Draws a state from the prior. Blocks masked out by the variant keep
/// their neutral values.
pub fn sample_prior<R: Rng + ?Sized>(layout: &ParamLayout, hyper: &Hyperparameters, rng: &mut R) -> ParameterState {
    let d = &layout.dims;
    let mut s = ParameterState::neutral(d);
    let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    s.phi.iter_mut().for_each(|v| *v = normal(rng));
    s.psi.iter_mut().for_each(|v| *v = normal(rng));
    let gamma_delta = Gamma::new(hyper.a_delta, 1.0 / hyper.b_delta).expect("valid gamma");
    s.delta.iter_mut().for_each(|v| *v = gamma_delta.sample(rng).max(f64::MIN_POSITIVE));
    let sr = hyper.sigma2_zeta * hyper.rho(d.num_predictors);
    for (level, present) in [(0usize, layout.log_lambda0_sq.is_some()), (1, layout.log_lambda1_sq.is_some())] {
        if !present {
            continue;
        }
        let alpha: f64 = rng.sample::<f64, _>(Exp1).max(1e-12);
        s.alpha_lambda[level] = alpha;
        let g = Gamma::new(alpha, sr / alpha).expect("valid gamma");
        let lam = if level == 0 { &mut s.lambda0 } else { &mut s.lambda1 };
        lam.iter_mut().for_each(|v| *v = g.sample(rng).max(f64::MIN_POSITIVE).sqrt());
    }
    let beta = Beta::new(hyper.beta_a, hyper.beta_b).expect("valid beta");
    let clamp01 = |t: f64| t.clamp(1e-12, 1.0 - 1e-12);
    if layout.logit_theta_region.is_some() {
        s.theta_region.iter_mut().for_each(|t| *t = clamp01(beta.sample(rng)));
    }
    if layout.logit_theta_contiguity.is_some() {
        s.theta_contiguity = clamp01(beta.sample(rng));
    }
    if layout.alr_omega.is_some() {
        let g = Gamma::new(hyper.a_omega, 1.0).expect("valid gamma");
        for w in s.omega.iter_mut() {
            w.iter_mut().for_each(|v| *v = g.sample(rng).max(1e-300));
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
        }
    }
    s.gamma[0] = (hyper.gamma1_scale * normal(rng)).abs().max(1e-300);
    for v in s.gamma[1..].iter_mut() {
        *v = normal(rng);
    }
    if layout.z0.is_some() {
        s.z0.iter_mut().for_each(|v| *v = normal(rng));
    }
    if layout.z1.is_some() {
        s.z1.iter_mut().for_each(|v| *v = normal(rng));
    }
    s.epsilon.iter_mut().for_each(|v| *v = normal(rng));
    s
}

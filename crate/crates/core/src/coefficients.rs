//! Cohort- and location-varying regression coefficients and the linear predictor.

use serde::{Deserialize, Serialize};

use crate::config::Dynamics;
use crate::data::RespondentRecord;
use crate::linalg::{lower_mul, Matrix};
use crate::params::{Dims, ParameterState};

/// `B0 = Phi diag(Delta) Psi` in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedMean {
    /// `n_d x rank`, row-major.
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    /// `rank x n_p`, row-major.
    pub psi: Vec<f64>,
    pub num_diseases: usize,
    pub num_predictors: usize,
}

/// Row-major `n_d x n_p` national mean effects.
pub fn assemble_b0(fm: &FactorizedMean) -> Vec<f64> {
    let rank = fm.delta.len();
    let (nd, np) = (fm.num_diseases, fm.num_predictors);
    let mut b = vec![0.0; nd * np];
    for j in 0..nd {
        for r in 0..rank {
            let a = fm.phi[j * rank + r] * fm.delta[r];
            if a == 0.0 {
                continue;
            }
            for h in 0..np {
                b[j * np + h] += a * fm.psi[r * np + h];
            }
        }
    }
    b
}

/// Spatially correlated deviations `xi = L z`.
pub fn correlate_deviations(z: &[f64], l: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    lower_mul(l, z, &mut out);
    out
}

/// Correlated deviation fields for every (j, h) and the scales that multiply them.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationField {
    /// `[(j * n_p + h) * n_l + l]`
    pub xi0: Vec<f64>,
    /// `[((j * n_p + h) * slices + k) * n_l + l]`
    pub xi1: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
}

impl DeviationField {
    /// Maps the seeds of `state` through the per-(set, j) Cholesky factors.
    /// `factors == None` means independent locations.
    pub fn from_state(dims: &Dims, state: &ParameterState, factors: Option<&[Matrix]>) -> Self {
        let (nd, np, nl) = (dims.num_diseases, dims.num_predictors, dims.num_locations);
        let slices = dims.shift_slices();
        let map = |z: &[f64], set: usize, j: usize| -> Vec<f64> {
            match factors {
                Some(f) => correlate_deviations(z, &f[set * nd + j]),
                None => z.to_vec(),
            }
        };
        let mut xi0 = vec![0.0; nd * np * nl];
        let mut xi1 = vec![0.0; nd * np * slices * nl];
        if dims.mask.local {
            let set0 = dims.omega_set(0);
            for j in 0..nd {
                for h in 0..np {
                    let o = (j * np + h) * nl;
                    xi0[o..o + nl].copy_from_slice(&map(&state.z0[o..o + nl], set0, j));
                }
            }
        }
        if dims.mask.local && dims.mask.temporal {
            let set1 = dims.omega_set(1);
            for j in 0..nd {
                for h in 0..np {
                    for k in 0..slices {
                        let o = ((j * np + h) * slices + k) * nl;
                        xi1[o..o + nl].copy_from_slice(&map(&state.z1[o..o + nl], set1, j));
                    }
                }
            }
        }
        Self { xi0, xi1, lambda0: state.lambda0.clone(), lambda1: state.lambda1.clone() }
    }
}

/// `beta_jh(l, c)` for cohort offset `c`.
///
/// Linear dynamics: `b0 + lambda0 xi0(l) + lambda1 xi1(l) c`.
/// Random walk: `b0 + lambda0 xi0(l) + lambda1 sum_{k=1..c} xi1(l, k)`.
pub fn coefficient_at(
    dims: &Dims,
    b0: &[f64],
    dev: &DeviationField,
    j: usize,
    h: usize,
    l: usize,
    c: usize,
) -> f64 {
    let (np, nl) = (dims.num_predictors, dims.num_locations);
    let jh = j * np + h;
    let base = b0[jh] + dev.lambda0[jh] * dev.xi0[jh * nl + l];
    match dims.dynamics {
        Dynamics::Linear => base + dev.lambda1[jh] * dev.xi1[jh * nl + l] * c as f64,
        Dynamics::RandomWalk => {
            let slices = dims.shift_slices();
            let mut beta = base;
            for step in 1..=c {
                beta += dev.lambda1[jh] * dev.xi1[(jh * slices + step - 1) * nl + l];
            }
            beta
        }
    }
}

/// All coefficients, laid out as one `n_d x n_p` matrix per (location, cohort) cell:
/// `[((l * n_c + c) * n_d + j) * n_p + h]`.
pub fn coefficient_table(dims: &Dims, b0: &[f64], dev: &DeviationField) -> Vec<f64> {
    let (nd, np, nl, nc) = (dims.num_diseases, dims.num_predictors, dims.num_locations, dims.num_cohorts);
    let slices = dims.shift_slices();
    let mut out = vec![0.0; nl * nc * nd * np];
    for j in 0..nd {
        for h in 0..np {
            let jh = j * np + h;
            let (lam0, lam1) = (dev.lambda0[jh], dev.lambda1[jh]);
            for l in 0..nl {
                let mut beta = b0[jh] + lam0 * dev.xi0[jh * nl + l];
                for c in 0..nc {
                    let v = match dims.dynamics {
                        Dynamics::Linear => beta + lam1 * dev.xi1[jh * nl + l] * c as f64,
                        Dynamics::RandomWalk => {
                            if c > 0 {
                                beta += lam1 * dev.xi1[(jh * slices + c - 1) * nl + l];
                            }
                            beta
                        }
                    };
                    out[((l * nc + c) * nd + j) * np + h] = v;
                }
            }
        }
    }
    out
}

/// `eta_i = B(l_i, c_i) x_i + gamma eps_i`, with `table` from [`coefficient_table`].
pub fn linear_predictor(
    dims: &Dims,
    table: &[f64],
    record: &RespondentRecord,
    gamma: &[f64],
    epsilon: f64,
) -> Vec<f64> {
    let (nd, np, nc) = (dims.num_diseases, dims.num_predictors, dims.num_cohorts);
    let cell = &table[(record.location * nc + record.cohort) * nd * np..][..nd * np];
    (0..nd)
        .map(|j| {
            let row = &cell[j * np..(j + 1) * np];
            row.iter().zip(&record.covariates).map(|(b, x)| b * x).sum::<f64>() + gamma[j] * epsilon
        })
        .collect()
}

/// `1 / (1 + exp(-eta))` without overflow.
#[inline]
pub fn inverse_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ModelVariant};
    use crate::kernels::cholesky_psd;

    fn dims(dynamics: Dynamics) -> Dims {
        let cfg = ModelConfig { dynamics, num_diseases: 2, num_cohorts: 4, ..ModelConfig::default() };
        Dims::new(&cfg, 3, 1, 0)
    }

    #[test]
    fn b0_zero_delta_annihilates() {
        let fm = FactorizedMean {
            phi: vec![1.0, 2.0, 3.0, 4.0],
            delta: vec![0.0, 0.0],
            psi: vec![1.0; 6],
            num_diseases: 2,
            num_predictors: 3,
        };
        assert!(assemble_b0(&fm).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn b0_identity_factors() {
        let fm = FactorizedMean {
            phi: vec![1.0, 0.0, 0.0, 1.0],
            delta: vec![2.0, 0.5],
            psi: vec![1.0, 0.0, 0.0, 1.0],
            num_diseases: 2,
            num_predictors: 2,
        };
        assert_eq!(assemble_b0(&fm), vec![2.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn b0_single_factor_is_rank_one() {
        let fm = FactorizedMean {
            phi: vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.5],
            delta: vec![0.7, 0.0],
            psi: vec![1.0, -2.0, 0.5, 4.0, 1.0, 1.0],
            num_diseases: 3,
            num_predictors: 3,
        };
        let b = assemble_b0(&fm);
        // every 2x2 minor vanishes
        for (r1, r2) in [(0, 1), (0, 2), (1, 2)] {
            for (c1, c2) in [(0, 1), (0, 2), (1, 2)] {
                let det = b[r1 * 3 + c1] * b[r2 * 3 + c2] - b[r1 * 3 + c2] * b[r2 * 3 + c1];
                assert!(det.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlate_examples() {
        let c = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let (l, _) = cholesky_psd(&c).unwrap();
        assert_eq!(correlate_deviations(&[0.0, 0.0], &l), vec![0.0, 0.0]);
        assert_eq!(correlate_deviations(&[0.3, -1.2], &Matrix::identity(2)), vec![0.3, -1.2]);
        let xi = correlate_deviations(&[1.0, 0.0], &l);
        assert!((xi[0] - 1.0).abs() < 1e-15 && (xi[1] - 0.5).abs() < 1e-15);
    }

    fn field(d: &Dims, seed: u64) -> DeviationField {
        let mut x = seed as f64;
        let mut next = || {
            x = (x * 1.618_033_988_7 + 0.312_5).fract();
            2.0 * x - 1.0
        };
        let n = d.coef_count();
        DeviationField {
            xi0: (0..n * d.num_locations).map(|_| next()).collect(),
            xi1: (0..n * d.shift_slices() * d.num_locations).map(|_| next()).collect(),
            lambda0: (0..n).map(|_| next().abs()).collect(),
            lambda1: (0..n).map(|_| next().abs()).collect(),
        }
    }

    #[test]
    fn fixed_effects_reduction() {
        let d = dims(Dynamics::Linear);
        let b0: Vec<f64> = (0..d.coef_count()).map(|i| i as f64 * 0.1).collect();
        let mut f = field(&d, 3);
        f.lambda0.iter_mut().for_each(|v| *v = 0.0);
        f.lambda1.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..3 {
            for c in 0..4 {
                assert_eq!(coefficient_at(&d, &b0, &f, 1, 2, l, c), b0[d.num_predictors + 2]);
            }
        }
    }

    #[test]
    fn first_cohort_drops_shift() {
        let d = dims(Dynamics::Linear);
        let b0 = vec![0.25; d.coef_count()];
        let f = field(&d, 5);
        let jh = 3;
        let expect = 0.25 + f.lambda0[jh] * f.xi0[jh * 3 + 1];
        assert_eq!(coefficient_at(&d, &b0, &f, 0, 3, 1, 0), expect);
    }

    #[test]
    fn constant_random_walk_shift_matches_linear() {
        let dl = dims(Dynamics::Linear);
        let dr = dims(Dynamics::RandomWalk);
        let b0 = vec![-0.4; dl.coef_count()];
        let fl = field(&dl, 7);
        let mut fr = fl.clone();
        let (np, nl, slices) = (dl.num_predictors, dl.num_locations, dr.shift_slices());
        fr.xi1 = vec![0.0; dl.coef_count() * slices * nl];
        for jh in 0..dl.coef_count() {
            for k in 0..slices {
                for l in 0..nl {
                    fr.xi1[(jh * slices + k) * nl + l] = fl.xi1[jh * nl + l];
                }
            }
        }
        let tl = coefficient_table(&dl, &b0, &fl);
        let tr = coefficient_table(&dr, &b0, &fr);
        for j in 0..2 {
            for h in 0..np {
                for l in 0..nl {
                    for c in 0..4 {
                        let a = coefficient_at(&dl, &b0, &fl, j, h, l, c);
                        let b = coefficient_at(&dr, &b0, &fr, j, h, l, c);
                        assert!((a - b).abs() < 1e-12);
                        assert_eq!(tl[((l * 4 + c) * 2 + j) * np + h], a);
                        assert!((tr[((l * 4 + c) * 2 + j) * np + h] - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn coefficients_linear_in_scales() {
        let d = dims(Dynamics::Linear);
        let b0 = vec![0.0; d.coef_count()];
        let f = field(&d, 11);
        let mut f2 = f.clone();
        f2.lambda0.iter_mut().for_each(|v| *v *= 2.0);
        f2.lambda1.iter_mut().for_each(|v| *v *= 2.0);
        let a = coefficient_at(&d, &b0, &f, 1, 1, 2, 3);
        let b = coefficient_at(&d, &b0, &f2, 1, 1, 2, 3);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn predictor_examples() {
        let d = dims(Dynamics::Linear);
        let b0: Vec<f64> = (0..d.coef_count()).map(|i| i as f64 - 3.0).collect();
        let f = field(&d, 13);
        let table = coefficient_table(&d, &b0, &f);
        let mut rec = RespondentRecord {
            id: "r".into(),
            location: 2,
            cohort: 1,
            responses: vec![0, 0],
            covariates: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            raw: Default::default(),
        };
        let eta = linear_predictor(&d, &table, &rec, &[1.0, 0.0], 0.0);
        for j in 0..2 {
            assert_eq!(eta[j], coefficient_at(&d, &b0, &f, j, 0, 2, 1));
        }
        let eta2 = linear_predictor(&d, &table, &rec, &[1.0, 0.0], 2.0);
        assert!((eta2[0] - eta[0] - 2.0).abs() < 1e-15);
        assert_eq!(eta2[1], eta[1]);
        rec.covariates = vec![1.0, 1.0, 0.0, 1.0, 1.0];
        let eta3 = linear_predictor(&d, &table, &rec, &[0.0, 0.0], 0.0);
        let manual: f64 = [0, 1, 3, 4].iter().map(|&h| coefficient_at(&d, &b0, &f, 1, h, 2, 1)).sum();
        assert!((eta3[1] - manual).abs() < 1e-12);
    }

    #[test]
    fn reference_profile_matches_table_two_intercepts() {
        // FE state whose B0 carries the national intercepts.
        let cfg = ModelConfig { num_diseases: 5, variant: ModelVariant::Fe, ..ModelConfig::default() };
        let d = Dims::new(&cfg, 1, 1, 1);
        let intercepts = [-3.46, -5.15, -2.62, -4.46, -3.08];
        let np = d.num_predictors;
        let mut b0 = vec![0.3; d.coef_count()];
        for j in 0..5 {
            b0[j * np] = intercepts[j];
        }
        let f = DeviationField {
            xi0: vec![0.0; d.coef_count()],
            xi1: vec![0.0; d.coef_count()],
            lambda0: vec![0.0; d.coef_count()],
            lambda1: vec![0.0; d.coef_count()],
        };
        let table = coefficient_table(&d, &b0, &f);
        let rec = RespondentRecord {
            id: "ref".into(),
            location: 0,
            cohort: 0,
            responses: vec![0; 5],
            covariates: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            raw: Default::default(),
        };
        assert_eq!(linear_predictor(&d, &table, &rec, &[1.0, 0.0, 0.0, 0.0, 0.0], 0.0), intercepts.to_vec());
    }

    #[test]
    fn inverse_logit_examples() {
        assert_eq!(inverse_logit(0.0), 0.5);
        let p = inverse_logit(-3.46);
        assert!((p - 1.0 / (1.0 + 3.46f64.exp())).abs() < 1e-16);
        assert!((p - 0.030_473).abs() < 5e-6, "{p}");
        assert!((1.0 - inverse_logit(40.0)).abs() < 1e-15);
        assert!(inverse_logit(-40.0) < 1e-15 && inverse_logit(-40.0) > 0.0);
        assert_eq!(inverse_logit(-1000.0), 0.0);
        assert_eq!(inverse_logit(1000.0), 1.0);
    }
}

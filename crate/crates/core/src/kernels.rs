//! Location kernels, their convex mixture and a guarded Cholesky factorisation.

use serde::{Deserialize, Serialize};

use crate::config::KernelSpec;
use crate::data::LocationTable;
use crate::error::KernelError;
use crate::linalg::{cholesky, Matrix};

/// Sampled kernel parameters; every entry lies strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub theta_region: Vec<f64>,
    pub theta_contiguity: f64,
}

/// Jitter multipliers tried in order, relative to the largest diagonal entry.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub weights: Vec<f64>,
    pub mixture: Matrix,
    pub cholesky: Matrix,
    pub jitter_applied: f64,
}

pub fn partition_kernel(l: usize, lp: usize, table: &LocationTable, theta: &[f64]) -> f64 {
    if l == lp {
        return 1.0;
    }
    let r = table.region_of(l);
    if r == table.region_of(lp) {
        theta[r]
    } else {
        0.0
    }
}

pub fn contiguity_kernel(l: usize, lp: usize, table: &LocationTable, theta_c: f64) -> Result<f64, KernelError> {
    if l == lp {
        return Ok(1.0);
    }
    if !table.are_neighbors(l, lp) {
        return Ok(0.0);
    }
    let (a, b) = (table.degree(l), table.degree(lp));
    if a == 0 || b == 0 {
        return Err(KernelError::ZeroDegreeNeighbor(l, lp));
    }
    Ok(theta_c / ((a * b) as f64).sqrt())
}

#[inline]
pub fn distance_kernel(l: usize, lp: usize, d: &Matrix) -> f64 {
    (-d[(l, lp)]).exp()
}

pub fn kernel_matrix(spec: KernelSpec, params: &KernelParams, table: &LocationTable) -> Result<Matrix, KernelError> {
    let n = table.num_locations();
    match spec {
        KernelSpec::Partition => {
            if params.theta_region.len() < table.num_regions() {
                return Err(KernelError::Shape(format!(
                    "{} region parameters for {} regions",
                    params.theta_region.len(),
                    table.num_regions()
                )));
            }
            Ok(Matrix::from_fn(n, |i, j| partition_kernel(i, j, table, &params.theta_region)))
        }
        KernelSpec::Contiguity => {
            let mut k = Matrix::identity(n);
            for (a, b) in table.edges() {
                let v = contiguity_kernel(a, b, table, params.theta_contiguity)?;
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
            Ok(k)
        }
        KernelSpec::Distance(m) => {
            let d = table.distance(m).ok_or(KernelError::MissingDistance(m))?;
            Ok(Matrix::from_fn(n, |i, j| distance_kernel(i, j, d)))
        }
    }
}

/// Adjoint of the region parameters given the adjoint of the partition
/// kernel's lower-triangle entries.
pub fn partition_theta_adjoint(table: &LocationTable, k_bar: &Matrix, out: &mut [f64]) {
    let n = table.num_locations();
    for i in 0..n {
        let r = table.region_of(i);
        for j in 0..i {
            if table.region_of(j) == r {
                out[r] += k_bar[(i, j)];
            }
        }
    }
}

/// Adjoint of the contiguity parameter given the lower-triangle kernel adjoint.
pub fn contiguity_theta_adjoint(table: &LocationTable, k_bar: &Matrix) -> f64 {
    table
        .edges()
        .into_iter()
        .map(|(a, b)| k_bar[(b, a)] / ((table.degree(a) * table.degree(b)) as f64).sqrt())
        .sum()
}

/// Factorises a symmetric matrix, escalating a diagonal jitter along
/// [`JITTER_LADDER`] before giving up.
pub fn cholesky_psd(c: &Matrix) -> Result<(Matrix, f64), KernelError> {
    let scale = c.max_diag().max(0.0);
    let mut last = 0.0;
    for mult in JITTER_LADDER {
        let jitter = mult * scale;
        last = jitter;
        let factor = if jitter == 0.0 {
            cholesky(c)
        } else {
            let mut cj = c.clone();
            for i in 0..cj.dim() {
                cj[(i, i)] += jitter;
            }
            cholesky(&cj)
        };
        if let Some(l) = factor {
            return Ok((l, jitter));
        }
    }
    Err(KernelError::NotPositiveDefinite { jitter: last })
}

/// `C = sum_m w_m K_m` followed by [`cholesky_psd`].
pub fn mixture_covariance(weights: &[f64], kernels: &[Matrix]) -> Result<CovarianceModel, KernelError> {
    if weights.len() != kernels.len() || kernels.is_empty() {
        return Err(KernelError::Shape(format!("{} weights for {} kernels", weights.len(), kernels.len())));
    }
    let n = kernels[0].dim();
    let mut mixture = Matrix::zeros(n);
    for (w, k) in weights.iter().zip(kernels) {
        if k.dim() != n {
            return Err(KernelError::Shape("kernel matrices differ in size".into()));
        }
        if *w != 0.0 {
            mixture.add_scaled(*w, k);
        }
    }
    let (cholesky, jitter_applied) = cholesky_psd(&mixture)?;
    Ok(CovarianceModel { weights: weights.to_vec(), mixture, cholesky, jitter_applied })
}

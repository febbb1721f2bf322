//! Small dense square-matrix helpers sized for location correlation matrices.

use serde::{Deserialize, Serialize};

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self { n, data: vec![value; n * n] }
    }

    /// Builds from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "matrix rows must be square");
            data.extend_from_slice(row);
        }
        Self { n, data }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn max_diag(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            for j in 0..i {
                let a = self[(i, j)];
                let b = self[(j, i)];
                if (a - b).abs() > tol * a.abs().max(b.abs()).max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn matmul_transpose(&self) -> Matrix {
        // self * self^T
        let n = self.n;
        Matrix::from_fn(n, |i, j| {
            self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum()
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Plain Cholesky factorisation reading only the lower triangle of `a`.
/// Returns `None` when a pivot is not strictly positive and finite.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.dim();
    let mut l = Matrix::zeros(n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut t = a[(i, j)];
            for k in 0..j {
                t -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = t / d;
        }
    }
    Some(l)
}

/// Reverse-mode sweep through [`cholesky`].
///
/// `l_bar` holds the adjoint of the lower factor; it is consumed. The result
/// is the adjoint with respect to the lower-triangle entries `a[(i, j)]`,
/// `i >= j`, of the input matrix (upper entries are zero).
pub fn cholesky_backward(l: &Matrix, mut l_bar: Matrix) -> Matrix {
    let n = l.dim();
    let mut a_bar = Matrix::zeros(n);
    for j in (0..n).rev() {
        let d = l[(j, j)];
        for i in (j + 1..n).rev() {
            let lb = l_bar[(i, j)];
            if lb == 0.0 {
                continue;
            }
            let t_bar = lb / d;
            l_bar[(j, j)] -= lb * l[(i, j)] / d;
            a_bar[(i, j)] += t_bar;
            for k in 0..j {
                l_bar[(i, k)] -= t_bar * l[(j, k)];
                l_bar[(j, k)] -= t_bar * l[(i, k)];
            }
        }
        let s_bar = l_bar[(j, j)] / (2.0 * d);
        a_bar[(j, j)] += s_bar;
        for k in 0..j {
            l_bar[(j, k)] -= 2.0 * s_bar * l[(j, k)];
        }
    }
    a_bar
}

/// `out = L z` for lower-triangular `L`.
pub fn lower_mul(l: &Matrix, z: &[f64], out: &mut [f64]) {
    let n = l.dim();
    for i in 0..n {
        let row = l.row(i);
        let mut acc = 0.0;
        for k in 0..=i {
            acc += row[k] * z[k];
        }
        out[i] = acc;
    }
}

/// `out += L^T v` for lower-triangular `L`.
pub fn lower_t_mul_add(l: &Matrix, v: &[f64], out: &mut [f64]) {
    let n = l.dim();
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        let row = l.row(i);
        for k in 0..=i {
            out[k] += row[k] * vi;
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sum(exp(xs)))`, shift-invariant.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Pairwise summation for a deterministic, low-error reduction order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Linear-interpolated quantile (type 7) of an unsorted slice.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_compound_symmetry() {
        let c = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let l = cholesky(&c).unwrap();
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 0.5).abs() < 1e-15);
        assert!((l[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!(l.matmul_transpose().max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(cholesky(&c).is_none());
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        // f(A) = sum_ij W_ij L_ij with a fixed weight matrix W.
        let n = 4;
        let a = Matrix::from_fn(n, |i, j| {
            if i == j {
                2.0 + i as f64 * 0.1
            } else {
                0.3 / (1.0 + (i as f64 - j as f64).abs())
            }
        });
        let w = Matrix::from_fn(n, |i, j| if i >= j { (i * 7 + j * 3) as f64 * 0.1 - 0.9 } else { 0.0 });
        let f = |m: &Matrix| -> f64 {
            let l = cholesky(m).unwrap();
            l.as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum()
        };
        let l = cholesky(&a).unwrap();
        let a_bar = cholesky_backward(&l, w.clone());
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                assert!((fd - a_bar[(i, j)]).abs() < 1e-7, "({i},{j}): fd {fd} vs {}", a_bar[(i, j)]);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_shift_invariant() {
        let xs = [-3.0, 0.5, 2.25, -1.0];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1234.5).collect();
        assert!((log_sum_exp(&shifted) - 1234.5 - log_sum_exp(&xs)).abs() < 1e-12);
    }

    #[test]
    fn log1p_exp_is_stable() {
        assert!((log1p_exp(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log1p_exp(800.0), 800.0);
        assert!(log1p_exp(-800.0) >= 0.0);
    }
}

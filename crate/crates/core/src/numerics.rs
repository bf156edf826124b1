//! Finite-difference Jacobians and the few dense linear-algebra helpers the
//! checks need.

use nalgebra::{DMatrix, DVector};

/// Relative step for central-difference Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-5;

/// Central-difference Jacobian of `f: R^n -> R^m` at `at`; entry `(i, j)` is `d f_i / d z_j`.
pub fn jacobian<F>(m: usize, at: &[f64], mut f: F) -> DMatrix<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = at.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut z = at.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for j in 0..n {
        let step = JACOBIAN_STEP * at[j].abs().max(1.0);
        z[j] = at[j] + step;
        f(&z, &mut plus);
        z[j] = at[j] - step;
        f(&z, &mut minus);
        z[j] = at[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    jac
}

/// Same as [`jacobian`], but never steps below zero in any coordinate:
/// a forward-biased difference is used where the central one would leave the orthant.
pub fn orthant_jacobian<F>(m: usize, at: &[f64], mut f: F) -> DMatrix<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = at.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut z = at.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for j in 0..n {
        let step = JACOBIAN_STEP * at[j].abs().max(1.0);
        let lo = (at[j] - step).max(0.0);
        let hi = lo + 2.0 * step;
        z[j] = hi;
        f(&z, &mut plus);
        z[j] = lo;
        f(&z, &mut minus);
        z[j] = at[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (hi - lo);
        }
    }
    jac
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest eigenvalue of the symmetric part `(A + A^T) / 2`.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn solve_linear(a: DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    a.lu().solve(&rhs).map(|v| v.iter().copied().collect())
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

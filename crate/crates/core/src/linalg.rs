//! Small dense-matrix helpers shared by the filters and the solver:
//! symmetrization, guarded Cholesky, SPD solves with conditioning checks,
//! and symmetric eigenvalue utilities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Reciprocal-condition floor below which SPD solves are refused.
pub const RCOND_MIN: f64 = 1e-12;

/// Force exact symmetry: (M + M^T) / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Cholesky factorization with escalating diagonal jitter (up to `max_jitter`)
/// for matrices that are PSD only up to rounding.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    max_jitter: f64,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let mut jitter = max_jitter * 1e-3;
    while jitter <= max_jitter {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of size {} not positive definite within jitter {max_jitter:e}",
        m.nrows()
    )))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Clamp a symmetric matrix onto the PSD cone by flooring its eigenvalues.
pub fn psd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut capped = eig.eigenvalues.clone();
    let mut dirty = false;
    for v in capped.iter_mut() {
        if *v < floor {
            *v = floor;
            dirty = true;
        }
    }
    if !dirty {
        return m.clone();
    }
    let q = eig.eigenvectors;
    symmetrize(&(&q * DMatrix::from_diagonal(&capped) * q.transpose()))
}

/// Solve S x = b for symmetric positive-definite S, refusing matrices whose
/// reciprocal condition number (eigenvalue ratio) falls below [`RCOND_MIN`].
pub fn spd_solve(s: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = spd_factor(s)?;
    Ok(chol.solve(b))
}

/// Solve S X = B column-wise for SPD S with the same conditioning guard.
pub fn spd_solve_matrix(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = spd_factor(s)?;
    Ok(chol.solve(b))
}

fn spd_factor(s: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let ev = sym_eigenvalues(s);
    let (min, max) = (ev[0], ev[ev.len() - 1]);
    if !(min.is_finite() && max.is_finite()) || max <= 0.0 || min / max < RCOND_MIN {
        return Err(Error::Numerical(format!(
            "SPD solve refused: eigenvalue range [{min:e}, {max:e}] below conditioning floor"
        )));
    }
    Cholesky::new(symmetrize(s))
        .ok_or_else(|| Error::Numerical("Cholesky factorization failed on SPD input".into()))
}

/// Check symmetry within `tol * ||M||` and minimum eigenvalue >= -tol.
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let norm = m.norm().max(1.0);
    let asym = (m - m.transpose()).norm();
    asym <= tol * norm && sym_eig_min(m) >= -tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_solve_recovers_solution() {
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let b = &s * &x;
        let got = spd_solve(&s, &b).unwrap();
        assert_relative_eq!((got - x).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn spd_solve_rejects_near_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-15]);
        assert!(spd_solve(&s, &DVector::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn jittered_cholesky_handles_semidefinite() {
        // rank-1 PSD matrix
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = &v * v.transpose();
        let chol = cholesky_with_jitter(&s, 1e-9).unwrap();
        let l = chol.l();
        assert_relative_eq!((&l * l.transpose() - &s).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn psd_floor_removes_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigs 3, -1
        let fixed = psd_floor(&m, 1e-9);
        assert!(sym_eig_min(&fixed) >= 0.0);
        assert_relative_eq!(sym_eig_max(&fixed), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn eig_bounds() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]);
        assert_relative_eq!(sym_eig_max(&m), 5.0, epsilon = 1e-12);
        assert_relative_eq!(sym_eig_min(&m), 2.0, epsilon = 1e-12);
    }
}

//! Small dense solvers shared by CP-ALS and the MSM baseline.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::tensor::Matrix;

/// Cholesky factor of a symmetric matrix, or `None` if a pivot is not
/// comfortably positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let floor = max_diag * 1e-14;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// True if a symmetric matrix factors without any ridge.
pub fn is_positive_definite(a: &[f64], n: usize) -> bool {
    cholesky(a, n).is_some()
}

/// Outcome of a regularized symmetric solve.
#[derive(Debug, Clone)]
pub struct SpdSolve {
    pub solution: Vec<f64>,
    /// Ridge actually added to the diagonal (0 if the plain solve succeeded).
    #[cfg_attr(not(test), allow(dead_code))]
    pub ridge_used: f64,
}

/// Solve `(A + ridge·I) X = B` for symmetric positive (semi)definite `A`.
///
/// `b` holds `m` right-hand sides stored row-major as an `n × m` block. When the
/// factorization fails the ridge starts at `fallback_ridge` and grows by 100×
/// per retry, so the call always returns a finite answer for finite input.
pub fn solve_spd(a: &[f64], n: usize, b: &[f64], m: usize, ridge: f64, fallback_ridge: f64) -> SpdSolve {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    let mut used = ridge;
    let mut work = a.to_vec();
    for i in 0..n {
        work[i * n + i] += ridge;
    }
    let mut factor = cholesky(&work, n);
    let mut bump = fallback_ridge.max(f64::MIN_POSITIVE);
    let mut tries = 0;
    while factor.is_none() && tries < 40 {
        work.copy_from_slice(a);
        used = ridge + bump;
        for i in 0..n {
            work[i * n + i] += used;
        }
        factor = cholesky(&work, n);
        bump *= 100.0;
        tries += 1;
    }
    let l = factor.expect("ridge escalation always yields a positive definite matrix");
    let mut solution = vec![0.0; n * m];
    let mut col = vec![0.0; n];
    for c in 0..m {
        for r in 0..n {
            col[r] = b[r * m + c];
        }
        cholesky_solve_in_place(&l, n, &mut col);
        for r in 0..n {
            solution[r * m + c] = col[r];
        }
    }
    SpdSolve {
        solution,
        ridge_used: used,
    }
}

/// Leading `r` eigenvectors (by eigenvalue, descending) of a symmetric
/// matrix, returned as the columns of an `n × r` matrix.
pub fn top_eigenvectors(sym: &Matrix, r: usize) -> Matrix {
    let n = sym.rows;
    let m = DMatrix::from_row_slice(n, n, &sym.data);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Matrix::from_fn(n, r, |row, c| eig.eigenvectors[(row, order[c])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_well_conditioned_system() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let b = [1.0, 2.0];
        let s = solve_spd(&a, 2, &b, 1, 0.0, 1e-10);
        assert_eq!(s.ridge_used, 0.0);
        // exact solution (1/11, 7/11)
        assert!((s.solution[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((s.solution[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_falls_back_to_ridge() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let b = [2.0, 2.0];
        let s = solve_spd(&a, 2, &b, 1, 0.0, 1e-10);
        assert!(s.ridge_used > 0.0);
        assert!(s.solution.iter().all(|v| v.is_finite()));
        // minimum-norm direction: both coordinates equal, summing to ~2
        assert!((s.solution[0] - s.solution[1]).abs() < 1e-6);
        assert!((s.solution[0] + s.solution[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn zero_matrix_is_total() {
        let s = solve_spd(&[0.0; 9], 3, &[0.0; 3], 1, 0.0, 1e-10);
        assert_eq!(s.solution, vec![0.0; 3]);
    }

    #[test]
    fn eigenvectors_of_diagonal() {
        let m = Matrix::from_fn(3, 3, |r, c| if r == c { [1.0, 5.0, 3.0][r] } else { 0.0 });
        let v = top_eigenvectors(&m, 2);
        assert!((v.get(1, 0).abs() - 1.0).abs() < 1e-12);
        assert!((v.get(2, 1).abs() - 1.0).abs() < 1e-12);
    }
}

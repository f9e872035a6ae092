//! Small dense helpers backed by nalgebra. Inputs are converted to `f64`;
//! these run at construction time only.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative cutoff below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

fn to_dmatrix<T: Scalar>(rows: &[Vec<T>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c].to_f64_lossy())
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(rows: &[Vec<T>], cols: usize) -> Vec<f64> {
    if rows.is_empty() || cols == 0 {
        return Vec::new();
    }
    let m = to_dmatrix(rows, cols);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank: singular values below `RANK_TOLERANCE * sigma_max` are zero.
pub fn rank<T: Scalar>(rows: &[Vec<T>], cols: usize) -> usize {
    let sv = singular_values(rows, cols);
    let Some(&top) = sv.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * top).count()
}

/// Factor a symmetric PSD matrix as `L L^T` through its eigendecomposition,
/// which (unlike Cholesky) tolerates singular and zero covariances.
pub fn psd_factor<T: Scalar>(cov: &[Vec<T>], tol: f64) -> Result<Vec<Vec<T>>> {
    let d = cov.len();
    if cov.iter().any(|row| row.len() != d) {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let m = to_dmatrix(cov, d);
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for r in 0..d {
        for c in 0..r {
            if (m[(r, c)] - m[(c, r)]).abs() > tol * scale {
                return Err(Error::InvalidProblem(format!(
                    "covariance not symmetric at ({r}, {c})"
                )));
            }
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut factor = vec![vec![T::zero(); d]; d];
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol * scale {
            return Err(Error::InvalidProblem(format!(
                "covariance not positive semidefinite (eigenvalue {lambda:e})"
            )));
        }
        let root = lambda.max(0.0).sqrt();
        if root == 0.0 {
            continue;
        }
        for r in 0..d {
            factor[r][k] = T::lit(eig.eigenvectors[(r, k)] * root);
        }
    }
    Ok(factor)
}

/// Unit vector spanning the null space of `rows` ((d-1) x d, rank d-1),
/// or `None` when the rows are rank deficient.
pub fn null_direction<T: Scalar>(rows: &[&[T]], d: usize) -> Option<Vec<f64>> {
    if d == 1 {
        return rows.iter().all(|r| r[0] == T::zero()).then(|| vec![1.0]);
    }
    // Pad to square so the SVD returns a full right basis.
    let m = DMatrix::from_fn(d, d, |r, c| {
        if r < rows.len() {
            rows[r][c].to_f64_lossy()
        } else {
            0.0
        }
    });
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let sv = &svd.singular_values;
    let top = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    if top == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[d - 2]] <= RANK_TOLERANCE * top {
        return None;
    }
    let k = order[d - 1];
    Some((0..d).map(|c| v_t[(k, c)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_duplicated_rows() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]];
        assert_eq!(rank(&rows, 2), 1);
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(rank(&rows, 2), 2);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let cov = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let l = psd_factor(&cov, 1e-9).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let v: f64 = (0..2).map(|k| l[r][k] * l[c][k]).sum();
                assert!((v - cov[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_covariance_factor_is_exactly_zero() {
        let l = psd_factor(&vec![vec![0.0f64; 3]; 3], 1e-9).unwrap();
        assert!(l.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(psd_factor(&[vec![1.0, 2.0], vec![2.0, 1.0]], 1e-9).is_err());
        assert!(psd_factor(&[vec![1.0, 0.3], vec![0.0, 1.0]], 1e-9).is_err());
    }

    #[test]
    fn null_direction_is_orthogonal() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 1.0, -1.0];
        let v = null_direction::<f64>(&[&a, &b], 3).unwrap();
        let dot = |u: &[f64]| u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        assert!(dot(&a).abs() < 1e-12 && dot(&b).abs() < 1e-12);
        assert!(null_direction::<f64>(&[&a, &a], 3).is_none());
    }
}

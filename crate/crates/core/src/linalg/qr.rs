use super::{frobenius_norm, Matrix};
use crate::{Error, Result};

/// Pivots whose remaining column norm is below this fraction of ‖a‖_F are treated as zero.
const DEFLATION_TOL: f64 = 1e-14;

/// Reduced Householder QR of a tall matrix.
///
/// Returns `q` (`rows × cols`, orthonormal columns) and upper-triangular `r`
/// (`cols × cols`) with a nonnegative diagonal. Columns that are numerically dependent
/// on earlier ones get no reflector, so the matching column of `q` is a canonical
/// direction carried through the previous reflectors: still orthonormal to everything
/// before it.
pub fn qr_reduced(a: &Matrix) -> Result<(Matrix, Matrix)> {
    if a.rows() < a.cols() {
        return Err(Error::invalid(format!(
            "qr_reduced needs rows >= cols, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(householder(a))
}

/// Orthonormal basis (as columns) for a space containing the range of `a`.
///
/// Has `min(rows, cols)` columns. For wide input the result is a full orthogonal basis
/// of the row space dimension, which trivially contains the range.
pub fn orthonormal_basis(a: &Matrix) -> Matrix {
    householder(a).0
}

fn householder(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    let k = m.min(n);
    let tol = DEFLATION_TOL * frobenius_norm(a);

    // Column-major working copy so reflectors touch contiguous memory.
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for (j, &x) in a.row(i).iter().enumerate() {
            w[j * m + i] = x;
        }
    }

    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    for j in 0..k {
        let x = &w[j * m + j..(j + 1) * m];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol || norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        v.iter_mut().for_each(|t| *t /= vnorm);
        for c in j..n {
            let col = &mut w[c * m + j..(c + 1) * m];
            reflect(col, &v);
        }
        reflectors.push(Some(v));
    }

    let mut r = Matrix::zeros(k, n);
    for i in 0..k {
        for c in i..n {
            r[(i, c)] = w[c * m + i];
        }
    }

    // Q = H_0 ... H_{k-1} [I_k; 0], built column by column.
    let mut q_cols = vec![0.0; k * m];
    for c in 0..k {
        let col = &mut q_cols[c * m..(c + 1) * m];
        col[c] = 1.0;
        for j in (0..k).rev() {
            if let Some(v) = &reflectors[j] {
                reflect(&mut col[j..], v);
            }
        }
    }

    let mut q = Matrix::zeros(m, k);
    for c in 0..k {
        let flip = r[(c, c)] < 0.0;
        if flip {
            for x in r.row_mut(c) {
                *x = -*x;
            }
        }
        let sign = if flip { -1.0 } else { 1.0 };
        for i in 0..m {
            q[(i, c)] = sign * q_cols[c * m + i];
        }
    }
    (q, r)
}

#[inline]
fn reflect(x: &mut [f64], v: &[f64]) {
    let d: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
    let d2 = 2.0 * d;
    for (a, b) in x.iter_mut().zip(v) {
        *a -= d2 * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    fn orthonormality_defect(q: &Matrix) -> f64 {
        q.t_matmul(q).unwrap().sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_input() {
        let (q, r) = qr_reduced(&Matrix::identity(4)).unwrap();
        assert_eq!(q, Matrix::identity(4));
        assert_eq!(r, Matrix::identity(4));
    }

    #[test]
    fn positive_diagonal_convention() {
        let (q, r) = qr_reduced(&Matrix::from_diag(&[2.0, 3.0])).unwrap();
        assert!(q.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert!(r.max_abs_diff(&Matrix::from_diag(&[2.0, 3.0])) < 1e-15);

        let (q, r) = qr_reduced(&Matrix::from_diag(&[-2.0, 3.0])).unwrap();
        assert!(r[(0, 0)] > 0.0);
        assert!(q.matmul(&r).unwrap().max_abs_diff(&Matrix::from_diag(&[-2.0, 3.0])) < 1e-15);
    }

    #[test]
    fn random_tall_reconstruction() {
        let a = gaussian_matrix(100, 8, 11);
        let (q, r) = qr_reduced(&a).unwrap();
        assert!(orthonormality_defect(&q) <= 1e-12);
        let err = q.matmul(&r).unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-12 * a.frobenius_norm());
        for i in 0..8 {
            assert!(r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn zero_and_dependent_columns_keep_q_orthonormal() {
        let mut a = gaussian_matrix(6, 4, 3);
        for i in 0..6 {
            a[(i, 1)] = 0.0;
            a[(i, 3)] = 2.0 * a[(i, 0)];
        }
        let (q, r) = qr_reduced(&a).unwrap();
        assert!(orthonormality_defect(&q) <= 1e-12);
        assert!(q.matmul(&r).unwrap().sub(&a).unwrap().frobenius_norm() <= 1e-12 * a.frobenius_norm());

        let (q, _) = qr_reduced(&Matrix::zeros(5, 3)).unwrap();
        assert!(orthonormality_defect(&q) <= 1e-12);
    }

    #[test]
    fn wide_input_gives_full_basis() {
        let a = gaussian_matrix(4, 7, 5);
        let q = orthonormal_basis(&a);
        assert_eq!(q.shape(), (4, 4));
        assert!(orthonormality_defect(&q) <= 1e-12);
        assert!(qr_reduced(&a).is_err());
    }
}

use super::Matrix;

/// Rotations stop once every column pair satisfies |aₚ·a_q| ≤ TOL·‖aₚ‖‖a_q‖.
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

/// Thin singular value decomposition `a = p · diag(sigma) · qᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors, `rows × k`.
    pub p: Matrix,
    /// Singular values, descending, `k = min(rows, cols)` of them.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols × k`.
    pub q: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut ps = self.p.clone();
        for i in 0..ps.rows() {
            for (x, s) in ps.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        ps.matmul_t(&self.q).expect("conformable by construction")
    }
}

/// One-sided (Hestenes) Jacobi SVD for the small core factors.
///
/// Square input yields orthogonal `p` and `q`. Each left singular vector is signed so its
/// first nonzero entry is positive, with the matching right vector flipped alongside.
pub fn svd_small(s: &Matrix) -> Svd {
    let mut out = if s.rows() < s.cols() {
        let t = svd_tall(&s.transpose());
        Svd { p: t.q, sigma: t.sigma, q: t.p }
    } else {
        svd_tall(s)
    };
    fix_signs(&mut out);
    out
}

/// Beyond this width, Jacobi runs on the transposed R factor of a QR preconditioning step,
/// which needs markedly fewer sweeps.
const PRECONDITION_MIN_COLS: usize = 24;

fn svd_tall(s: &Matrix) -> Svd {
    if s.cols() < PRECONDITION_MIN_COLS {
        return jacobi(s);
    }
    let (q0, r) = super::qr_reduced(s).expect("tall input");
    // rᵀ = P Σ Qᵀ  ⇒  s = (q0 Q) Σ Pᵀ.
    let inner = jacobi(&r.transpose());
    Svd {
        p: q0.matmul(&inner.q).expect("conformable"),
        sigma: inner.sigma,
        q: inner.p,
    }
}

fn jacobi(s: &Matrix) -> Svd {
    let (m, n) = s.shape();

    // Columns of the working matrix and of the accumulated right rotation, contiguous.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| s.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        // Squared column norms, refreshed every sweep and updated in closed form per rotation.
        let mut sq: Vec<f64> = a.iter().map(|col| dot(col, col)).collect();
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (sq[p], sq[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                rotate(&mut a, p, q, c, sn);
                rotate(&mut v, p, q, c, sn);
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut q = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        sigma.push(sj);
        if sigma_max > 0.0 && sj > 1e-13 * sigma_max {
            u_cols.push(Some(a[j].iter().map(|x| x / sj).collect()));
        } else {
            u_cols.push(None);
        }
        for i in 0..n {
            q[(i, k)] = v[j][i];
        }
    }
    let u_cols = complete_orthonormal(u_cols, m);
    let mut p = Matrix::zeros(m, n);
    for (k, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            p[(i, k)] = col[i];
        }
    }
    Svd { p, sigma, q }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let xs = x.chunks_exact(4);
    let ys = y.chunks_exact(4);
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    for (cx, cy) in xs.zip(ys) {
        for k in 0..4 {
            acc[k] += cx[k] * cy[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing columns with canonical directions orthogonalized against the rest.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, m: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_canonical = 0;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => loop {
                assert!(next_canonical < m, "cannot complete basis");
                let mut e = vec![0.0; m];
                e[next_canonical] = 1.0;
                next_canonical += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&e, d);
                        e.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 1e-8 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    done.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

fn fix_signs(svd: &mut Svd) {
    for k in 0..svd.sigma.len() {
        let first = (0..svd.p.rows()).map(|i| svd.p[(i, k)]).find(|x| *x != 0.0);
        if first.is_some_and(|x| x < 0.0) {
            for i in 0..svd.p.rows() {
                svd.p[(i, k)] = -svd.p[(i, k)];
            }
            for i in 0..svd.q.rows() {
                svd.q[(i, k)] = -svd.q[(i, k)];
            }
        }
    }
}

//! Small dense linear algebra: singular values via one-sided Jacobi and
//! LU-based solves. Sized for matrices up to a few hundred rows; accuracy
//! matters more than speed here.

use crate::error::{Result, VitapesError};
use crate::tensor::TensorF;

/// Singular values of an m x n matrix, descending order.
///
/// One-sided Jacobi on the columns of A (A is transposed first when m < n so
/// the sweep always runs on the tall orientation). Converges to machine
/// precision for the sizes used by the rank audits.
pub fn singular_values(a: &TensorF) -> Result<Vec<f64>> {
    if a.rank() != 2 {
        return Err(VitapesError::Shape("singular_values requires rank-2".into()));
    }
    if !a.is_finite() {
        return Err(VitapesError::Numeric("singular_values on non-finite input".into()));
    }
    let work = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let m = work.rows();
    let n = work.cols();
    // Column-major copy so column rotations are contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| work.at(i, j)).collect())
        .collect();

    let max_sweeps = 60;
    let eps = 1e-15;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    app += cols[p][i] * cols[p][i];
                    aqq += cols[q][i] * cols[q][i];
                    apq += cols[p][i] * cols[q][i];
                }
                off = off.max(apq.abs() / (app.sqrt() * aqq.sqrt() + f64::MIN_POSITIVE));
                if apq.abs() <= eps * (app.sqrt() * aqq.sqrt()) {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }

    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sigma)
}

/// LU factorization with partial pivoting of a square matrix.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

fn lu_factor(a: &TensorF) -> Result<Lu> {
    let n = a.rows();
    if a.cols() != n {
        return Err(VitapesError::Shape("lu_factor requires a square matrix".into()));
    }
    let mut lu = a.data().to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut maxv = lu[k * n + k].abs();
        for i in (k + 1)..n {
            let v = lu[i * n + k].abs();
            if v > maxv {
                maxv = v;
                p = i;
            }
        }
        if maxv < 1e-300 {
            return Err(VitapesError::Numeric("singular matrix in LU factorization".into()));
        }
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let pivot = lu[k * n + k];
        for i in (k + 1)..n {
            let factor = lu[i * n + k] / pivot;
            lu[i * n + k] = factor;
            for j in (k + 1)..n {
                lu[i * n + j] -= factor * lu[k * n + j];
            }
        }
    }
    Ok(Lu { n, lu, piv })
}

impl Lu {
    /// Solve A x = b for one right-hand side.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|i| b[self.piv[i]]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}

/// Solve X W = Y for X, where W is square n x n and Y is m x n.
///
/// Equivalent to right-multiplying Y by the inverse of W; used by the
/// constructive fusion inverse.
pub fn solve_right(w: &TensorF, y: &TensorF) -> Result<TensorF> {
    let n = w.rows();
    if w.cols() != n {
        return Err(VitapesError::Shape("solve_right needs square W".into()));
    }
    if y.cols() != n {
        return Err(VitapesError::Shape(format!(
            "solve_right width mismatch: Y is {:?}, W is {}x{}",
            y.shape(),
            n,
            n
        )));
    }
    // X W = Y  <=>  W^T X^T = Y^T; factor W^T once and solve per row of Y.
    let lu = lu_factor(&w.transpose())?;
    let mut out = TensorF::zeros(vec![y.rows(), n]);
    for i in 0..y.rows() {
        let x = lu.solve(y.row(i));
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// Inverse of a square matrix, via LU solves against the identity.
pub fn invert(a: &TensorF) -> Result<TensorF> {
    let n = a.rows();
    let lu = lu_factor(a)?;
    let mut out = TensorF::zeros(vec![n, n]);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = lu.solve(&e);
        for i in 0..n {
            out.set(i, j, col[i]);
        }
        e[j] = 0.0;
    }
    Ok(out)
}

/// Left pseudo-inverse application: recover X from Y = X W when W (p x d,
/// p <= d) has full row rank. Returns Y W^T (W W^T)^{-1}.
pub fn solve_right_rect(w: &TensorF, y: &TensorF) -> Result<TensorF> {
    let p = w.rows();
    let d = w.cols();
    if p > d {
        return Err(VitapesError::InversionUnsupported(format!(
            "projection {}x{} has more rows than columns; cannot right-invert",
            p, d
        )));
    }
    let gram = w.matmul(&w.transpose())?; // p x p
    let gram_inv = invert(&gram).map_err(|_| {
        VitapesError::InversionUnsupported("patch projection is rank-deficient".into())
    })?;
    y.matmul(&w.transpose())?.matmul(&gram_inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: eigenvalues of A^T A via cyclic two-sided Jacobi
    /// on the symmetric Gram matrix; singular values are their square roots.
    fn singular_values_oracle(a: &TensorF) -> Vec<f64> {
        let g = a.transpose().matmul(a).unwrap();
        let n = g.rows();
        let mut m: Vec<f64> = g.data().to_vec();
        for _ in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off.max(m[p * n + q].abs());
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    let theta = 0.5 * (aqq - app).atan2(2.0 * apq).to_degrees();
                    // rotation angle from standard Jacobi formula
                    let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                    let _ = theta;
                    let c = phi.cos();
                    let s = phi.sin();
                    for k in 0..n {
                        let mkp = m[k * n + p];
                        let mkq = m[k * n + q];
                        m[k * n + p] = c * mkp + s * mkq;
                        m[k * n + q] = -s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p * n + k];
                        let mqk = m[q * n + k];
                        m[p * n + k] = c * mpk + s * mqk;
                        m[q * n + k] = -s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i].max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }

    #[test]
    fn svd_identity_all_ones() {
        let sv = singular_values(&TensorF::eye(4)).unwrap();
        for s in sv {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_diagonal_matches_entries() {
        let mut d = TensorF::zeros(vec![4, 4]);
        for (i, v) in [2.0, 1.0, 0.5, 0.0].iter().enumerate() {
            d.set(i, i, *v);
        }
        let sv = singular_values(&d).unwrap();
        assert!((sv[0] - 2.0).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
        assert!((sv[2] - 0.5).abs() < 1e-12);
        assert!(sv[3].abs() < 1e-12);
    }

    #[test]
    fn svd_random_matches_eigensolve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = TensorF::randn(vec![6, 4], &mut rng);
        let sv = singular_values(&a).unwrap();
        let oracle = singular_values_oracle(&a);
        assert_eq!(sv.len(), 4);
        for (s, o) in sv.iter().zip(&oracle) {
            assert!(
                (s - o).abs() < 1e-8,
                "jacobi {} vs eigensolve oracle {}",
                s,
                o
            );
        }
    }

    #[test]
    fn svd_wide_matrix_uses_small_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = TensorF::randn(vec![3, 7], &mut rng);
        let sv = singular_values(&a).unwrap();
        assert_eq!(sv.len(), 3);
        let oracle = singular_values_oracle(&a.transpose());
        for (s, o) in sv.iter().zip(&oracle) {
            assert!((s - o).abs() < 1e-8);
        }
    }

    #[test]
    fn solve_right_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = TensorF::randn(vec![5, 5], &mut rng);
        let x = TensorF::randn(vec![3, 5], &mut rng);
        let y = x.matmul(&w).unwrap();
        let back = solve_right(&w, &y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn invert_times_original_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = TensorF::randn(vec![6, 6], &mut rng);
        let ainv = invert(&a).unwrap();
        let prod = a.matmul(&ainv).unwrap();
        assert!(prod.max_abs_diff(&TensorF::eye(6)) < 1e-10);
    }

    #[test]
    fn singular_matrix_refused() {
        let mut a = TensorF::zeros(vec![3, 3]);
        a.set(0, 0, 1.0);
        a.set(1, 1, 1.0);
        assert!(invert(&a).is_err());
    }

    #[test]
    fn rect_right_inverse_recovers_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = TensorF::randn(vec![4, 8], &mut rng);
        let x = TensorF::randn(vec![5, 4], &mut rng);
        let y = x.matmul(&w).unwrap();
        let back = solve_right_rect(&w, &y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }
}

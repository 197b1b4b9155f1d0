//! Small dense linear-algebra helpers (Householder QR, Jacobi eigensolver,
//! Cholesky) kept dependency-free so results are deterministic across
//! platforms. Sizes here are model-scale (m up to ~1000), not BLAS-scale.

use ndarray::{Array1, Array2};

use crate::{EcaError, Result};

/// ||I - P^T P||_F, the orthogonality residual used everywhere.
pub fn orthogonality_residual(p: &Array2<f64>) -> f64 {
    let ptp = p.t().dot(p);
    let mut acc = 0.0;
    for ((i, j), v) in ptp.indexed_iter() {
        let r = if i == j { 1.0 - v } else { -v };
        acc += r * r;
    }
    acc.sqrt()
}

/// Orthogonal factor of the QR decomposition of a square matrix, via
/// Householder reflections. Signs are fixed so that the diagonal of R is
/// nonnegative, which makes the factor deterministic.
pub fn qr_orthogonal(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "qr_orthogonal expects a square matrix");
    let mut r = a.clone();
    let mut q = Array2::<f64>::eye(n);
    for k in 0..n {
        // Householder vector for column k below the diagonal.
        let mut norm = 0.0;
        for i in k..n {
            norm += r[[i, k]] * r[[i, k]];
        }
        let norm = norm.sqrt();
        if norm < 1e-300 {
            continue;
        }
        let alpha = if r[[k, k]] > 0.0 { -norm } else { norm };
        let mut v = Array1::<f64>::zeros(n);
        for i in k..n {
            v[i] = r[[i, k]];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 < 1e-300 {
            continue;
        }
        // r <- (I - 2 v v^T / v^T v) r ; q <- q (I - 2 v v^T / v^T v)
        for j in k..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * r[[i, j]];
            }
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r[[i, j]] -= f * v[i];
            }
        }
        for i in 0..n {
            let mut dot = 0.0;
            for j in k..n {
                dot += q[[i, j]] * v[j];
            }
            let f = 2.0 * dot / vnorm2;
            for j in k..n {
                q[[i, j]] -= f * v[j];
            }
        }
    }
    // Flip columns where the R diagonal came out negative.
    for k in 0..n {
        if r[[k, k]] < 0.0 {
            for i in 0..n {
                q[[i, k]] = -q[[i, k]];
            }
        }
    }
    q
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues, eigenvectors-as-columns), unsorted.
pub fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

/// Cholesky factor L (lower triangular, A = L L^T) of an SPD matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(EcaError::SingularMatrix(format!(
                        "non-positive pivot {s:.3e} at row {i}"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve A X = B for SPD A via Cholesky.
pub fn spd_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let cols = b.ncols();
    let mut x = b.clone();
    // forward: L y = b
    for c in 0..cols {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Condition number estimate of a symmetric PSD matrix (Jacobi eigenvalues).
pub fn symmetric_condition(a: &Array2<f64>) -> f64 {
    let (vals, _) = jacobi_eigh(a);
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &v in vals.iter() {
        let v = v.abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Frobenius norm.
pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, standard_normal};

    fn random_square(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, "linalg-test");
        Array2::from_shape_fn((n, n), |_| standard_normal(&mut rng))
    }

    #[test]
    fn qr_factor_is_orthogonal() {
        for n in [1, 2, 5, 17] {
            let q = qr_orthogonal(&random_square(n, n as u64));
            assert!(
                orthogonality_residual(&q) < 1e-12,
                "residual for n={n}: {}",
                orthogonality_residual(&q)
            );
        }
    }

    #[test]
    fn qr_is_deterministic() {
        let a = random_square(6, 9);
        let q1 = qr_orthogonal(&a);
        let q2 = qr_orthogonal(&a);
        assert_eq!(q1, q2);
    }

    #[test]
    fn jacobi_recovers_spectrum() {
        let q = qr_orthogonal(&random_square(5, 3));
        let d = Array1::from(vec![3.0, -1.0, 0.5, 7.0, 2.0]);
        let mut a = Array2::<f64>::zeros((5, 5));
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += q[[i, k]] * d[k] * q[[j, k]];
                }
                a[[i, j]] = s;
            }
        }
        let (mut vals, _) = jacobi_eigh(&a);
        let mut want = d.to_vec();
        let mut got = vals.as_slice_mut().unwrap().to_vec();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (w, g) in want.iter().zip(&got) {
            assert!((w - g).abs() < 1e-9, "want {w}, got {g}");
        }
    }

    #[test]
    fn spd_solve_roundtrip() {
        let b = random_square(4, 5);
        let a = b.t().dot(&b) + Array2::<f64>::eye(4);
        let rhs = random_square(4, 6);
        let x = spd_solve(&a, &rhs).unwrap();
        let back = a.dot(&x);
        for (u, v) in back.iter().zip(rhs.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let mut a = Array2::<f64>::zeros((3, 3));
        a[[0, 0]] = 1.0;
        a[[1, 1]] = 1.0;
        assert!(matches!(cholesky(&a), Err(EcaError::SingularMatrix(_))));
    }
}

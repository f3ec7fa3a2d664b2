//! Dense helpers: discrete Riccati and Lyapunov solvers, spectral quantities.

use nalgebra::DMatrix;

/// Largest absolute eigenvalue.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest singular value (spectral norm).
pub fn sigma_max(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().max()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    let s = symmetrize(a);
    let ev = s.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Max-abs entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Residual of the DARE  P = Q + A'PA - A'PB (R + B'PB)^-1 B'PA.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let k = s.lu().solve(&(&btp * a)).expect("R + B'PB singular");
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * k;
    max_abs(&(rhs - p))
}

/// Solution of the discrete algebraic Riccati equation.
#[derive(Clone, Debug)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// Optimal gain with u = -K x.
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves the DARE by the structured doubling algorithm, polished with
/// fixed-point sweeps. Returns `None` when it does not converge within
/// `max_iter` total iterations to `tol`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution, (DMatrix<f64>, f64)> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let r_inv = r.clone().try_inverse().ok_or((q.clone(), f64::INFINITY))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let mut it = 0;
    while it < max_iter.min(200) {
        it += 1;
        let m = &eye + &gk * &hk;
        let Some(m_inv) = m.try_inverse() else { break };
        let a_next = &ak * &m_inv * &ak;
        let g_next = &gk + &ak * &m_inv * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &m_inv * &ak;
        let change = max_abs(&(&h_next - &hk)) / (1.0 + max_abs(&h_next));
        ak = a_next;
        gk = symmetrize(&g_next);
        hk = symmetrize(&h_next);
        if change < 1e-15 || max_abs(&ak) < 1e-300 {
            break;
        }
    }
    let mut p = hk;
    let mut residual = dare_residual(a, b, q, r, &p);
    // Fixed-point polishing; contractive near the stabilizing solution.
    while residual > tol && it < max_iter {
        it += 1;
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let Some(k) = s.lu().solve(&(&btp * a)) else { break };
        p = symmetrize(&(q + a.transpose() * &p * a - a.transpose() * &p * b * k));
        residual = dare_residual(a, b, q, r, &p);
    }
    if !(residual <= tol) {
        return Err((p, residual));
    }
    let btp = b.transpose() * &p;
    let k = (r + &btp * b).lu().solve(&(&btp * a)).ok_or((p.clone(), residual))?;
    Ok(DareSolution { p, k, residual, iterations: it })
}

/// Residual of  A'PA + W - P.
pub fn lyapunov_residual(a: &DMatrix<f64>, w: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    max_abs(&(a.transpose() * p * a + w - p))
}

/// Solves the discrete Lyapunov equation A'PA + W = P through its Kronecker form.
/// Returns `None` if the linear system is singular.
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let nn = n * n;
    // vec(A'PA) = (A' kron A') vec(P) in column-major vec.
    let at = a.transpose();
    let mut m = DMatrix::<f64>::identity(nn, nn);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    // (A' kron A')[(j*n + i), (l*n + k)] = A'[j,l] A'[i,k]
                    m[(j * n + i, l * n + k)] -= at[(j, l)] * at[(i, k)];
                }
            }
        }
    }
    let rhs = DMatrix::from_column_slice(nn, 1, w.as_slice());
    let lu = m.lu();
    let mut sol = lu.solve(&rhs)?;
    let mut p = DMatrix::from_column_slice(n, n, sol.as_slice());
    p = symmetrize(&p);
    // One step of iterative refinement.
    let res = a.transpose() * &p * a + w - &p;
    let rvec = DMatrix::from_column_slice(nn, 1, res.as_slice());
    if let Some(corr) = lu.solve(&rvec) {
        sol = corr;
        p += DMatrix::from_column_slice(n, n, sol.as_slice());
        p = symmetrize(&p);
    }
    Some(p)
}

//! Small dense linear-algebra helpers used across the solver: nonnegative
//! least squares for feasible starting points, an LU solve with one step of
//! iterative refinement, a tridiagonal (Thomas) solver, and a null-space
//! basis used to enumerate reaction extents.

use nalgebra::{DMatrix, DVector};

/// Solves min ||A x - b||_2 subject to x >= 0 (Lawson-Hanson active set).
/// Deterministic: ties in the gradient pick the lowest index. The result is
/// the least-squares point; callers decide whether its residual means the
/// problem is infeasible.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let atb_scale = (a.transpose() * b).amax().max(1.0);
    let tol = 1e-12 * atb_scale;
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !passive[i] && w[i] > tol {
                if best.map_or(true, |(_, bw)| w[i] > bw) {
                    best = Some((i, w[i]));
                }
            }
        }
        let Some((enter, _)) = best else {
            break;
        };
        passive[enter] = true;

        loop {
            let z = passive_least_squares(a, b, &passive);
            let mut alpha = 1.0_f64;
            let mut blocking = None;
            for i in 0..n {
                if passive[i] && z[i] <= 0.0 {
                    let step = x[i] / (x[i] - z[i]);
                    if step < alpha {
                        alpha = step;
                        blocking = Some(i);
                    }
                }
            }
            if blocking.is_none() {
                x = z;
                break;
            }
            for i in 0..n {
                if passive[i] {
                    x[i] += alpha * (z[i] - x[i]);
                }
            }
            for i in 0..n {
                if passive[i] && x[i] <= tol * 1e-3 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    x
}

/// Least squares over the passive columns only, zeros elsewhere.
fn passive_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&i| passive[i]).collect();
    let mut sub = DMatrix::<f64>::zeros(a.nrows(), cols.len());
    for (k, &i) in cols.iter().enumerate() {
        sub.set_column(k, &a.column(i));
    }
    let svd = sub.svd(true, true);
    let zsub = svd
        .solve(b, 1e-13 * svd.singular_values.amax().max(1.0))
        .expect("svd solve");
    let mut z = DVector::<f64>::zeros(a.ncols());
    for (k, &i) in cols.iter().enumerate() {
        z[i] = zsub[k];
    }
    z
}

/// LU solve with one pass of iterative refinement. Returns None when the
/// factorization is singular to working precision.
pub fn solve_refined(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = m.clone().lu();
    let mut x = lu.solve(rhs)?;
    let r = rhs - m * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Some(x)
}

/// Same LU reused for several right-hand sides, each refined once.
pub struct RefinedLu {
    m: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl RefinedLu {
    pub fn new(m: DMatrix<f64>) -> Self {
        let lu = m.clone().lu();
        RefinedLu { m, lu }
    }

    /// None if the factorization is singular to working precision.
    pub fn try_new(m: DMatrix<f64>) -> Option<Self> {
        let this = RefinedLu::new(m);
        let probe = DVector::from_element(this.m.nrows(), 1.0);
        this.lu.solve(&probe)?;
        Some(this)
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = self.lu.solve(rhs)?;
        let r = rhs - &self.m * &x;
        let dx = self.lu.solve(&r)?;
        x += dx;
        Some(x)
    }
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and
/// `upper[len-1]` are ignored. Panics on a zero pivot, which cannot occur
/// for the diagonally dominant transport matrices this is used on.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    assert!(n > 0 && lower.len() == n && upper.len() == n && rhs.len() == n);
    let mut c = vec![0.0_f64; n];
    let mut pivot = diag[0];
    assert!(pivot != 0.0, "singular tridiagonal system");
    c[0] = upper[0] / pivot;
    rhs[0] /= pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        assert!(pivot != 0.0, "singular tridiagonal system");
        c[i] = upper[i] / pivot;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Orthonormal basis of the null space of `a` (columns of the result),
/// computed from the symmetric eigendecomposition of A^T A. Used by tests
/// and the brute-force Gibbs scans to parameterize reaction extents.
pub fn nullspace(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = 1e-20 * lmax.max(1e-300);
    let mut cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] <= tol).collect();
    // deterministic order: ascending eigenvalue, then index
    cols.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut basis = DMatrix::<f64>::zeros(n, cols.len());
    for (k, &c) in cols.iter().enumerate() {
        let v = eig.eigenvectors.column(c);
        // fix sign so the basis is reproducible across runs
        let lead = v.iter().cloned().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let s = if lead < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(k, &(v * s));
    }
    basis
}

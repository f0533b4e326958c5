//! Dense linear algebra kernels: DARE solution, LQR gain, null-space
//! bases, and Lyapunov-based Schur stability checks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("R + B'PB is singular")]
    SingularGainSystem,
    #[error("R is not positive definite")]
    RNotPositiveDefinite,
    #[error("DARE iteration did not converge within {max_iter} iterations (residual {residual:.3e})")]
    DareNotConverged { max_iter: usize, residual: f64 },
    #[error("DARE produced an unstable closed loop")]
    UnstableClosedLoop,
}

/// Stabilizing solution of the discrete algebraic Riccati equation
/// together with the associated feedback gain.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub iterations: usize,
}

/// Outcome of the discrete Lyapunov stability test. When `stable`, the
/// certificate X solves M'XM - X = -I and is positive definite.
#[derive(Debug, Clone)]
pub struct StabilityCheck {
    pub stable: bool,
    pub certificate: Option<DMatrix<f64>>,
    pub diagnostic: Option<String>,
}

fn check_finite(m: &DMatrix<f64>) -> Result<(), LinalgError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// K = -(R + B'PB)^{-1} B'PA.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let m = a.nrows();
    if a.ncols() != m || b.nrows() != m || p.nrows() != m || p.ncols() != m {
        return Err(LinalgError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, P {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            p.nrows(),
            p.ncols()
        )));
    }
    let s = r + b.transpose() * p * b;
    let rhs = b.transpose() * p * a;
    s.clone()
        .lu()
        .solve(&rhs)
        .map(|k| -k)
        .ok_or(LinalgError::SingularGainSystem)
}

/// Solves P = A'PA + Q - A'PB (B'PB + R)^{-1} B'PA by fixed-point
/// iteration from P0 = Q, symmetrizing each step.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, LinalgError> {
    let m = a.nrows();
    let n = b.ncols();
    if a.ncols() != m || b.nrows() != m || q.nrows() != m || q.ncols() != m {
        return Err(LinalgError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if r.nrows() != n || r.ncols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "R {}x{} but B has {} columns",
            r.nrows(),
            r.ncols(),
            n
        )));
    }
    check_finite(a)?;
    check_finite(b)?;
    check_finite(q)?;
    check_finite(r)?;
    if r.clone().cholesky().is_none() {
        return Err(LinalgError::RNotPositiveDefinite);
    }

    let riccati_step = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, LinalgError> {
        let s = r + b.transpose() * p * b;
        let rhs = b.transpose() * p * a;
        let sol = s
            .lu()
            .solve(&rhs)
            .ok_or(LinalgError::SingularGainSystem)?;
        let next = a.transpose() * p * a + q - a.transpose() * p * b * sol;
        Ok((&next + next.transpose()) * 0.5)
    };

    let mut p = q.clone();
    let mut iterations = max_iter;
    let mut last_delta = f64::INFINITY;
    for it in 0..max_iter {
        let next = riccati_step(&p)?;
        last_delta = max_abs(&(&next - &p));
        p = next;
        if last_delta <= tol {
            iterations = it + 1;
            break;
        }
    }
    let residual = max_abs(&(riccati_step(&p)? - &p));
    if iterations == max_iter && last_delta > tol {
        return Err(LinalgError::DareNotConverged { max_iter, residual });
    }
    let k = lqr_gain(a, b, r, &p)?;
    let a_cl = a + b * &k;
    if !is_schur_stable(&a_cl).stable {
        return Err(LinalgError::UnstableClosedLoop);
    }
    Ok(RiccatiSolution {
        p,
        k,
        a_cl,
        iterations,
    })
}

/// Orthonormal basis of ker M via SVD. Singular values below
/// `tol * sigma_max` count as zero.
pub fn null_space_basis(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>, LinalgError> {
    check_finite(m)?;
    let cols = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("SVD V requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let threshold = tol * sigma_max.max(1.0e-300);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > threshold)
        .count();
    // v_t has min(rows, cols) rows; directions beyond it are exact kernel.
    let mut basis_cols: Vec<DVector<f64>> = Vec::new();
    for i in rank..v_t.nrows() {
        basis_cols.push(v_t.row(i).transpose());
    }
    // Complete with the orthogonal complement when m has fewer rows than cols.
    if v_t.nrows() < cols {
        let mut candidates: Vec<DVector<f64>> = (0..cols)
            .map(|j| {
                let mut e = DVector::zeros(cols);
                e[j] = 1.0;
                e
            })
            .collect();
        let mut ortho: Vec<DVector<f64>> = (0..v_t.nrows())
            .map(|i| v_t.row(i).transpose())
            .collect();
        ortho.extend(basis_cols.iter().cloned());
        for cand in candidates.drain(..) {
            let mut v = cand;
            for u in &ortho {
                let proj = u.dot(&v);
                v -= u * proj;
            }
            let norm = v.norm();
            if norm > 1.0e-8 {
                let v = v / norm;
                ortho.push(v.clone());
                basis_cols.push(v);
            }
        }
    }
    let nullity = basis_cols.len();
    let mut basis = DMatrix::zeros(cols, nullity);
    for (j, col) in basis_cols.iter().enumerate() {
        basis.set_column(j, col);
    }
    Ok(basis)
}

/// Solves M'XM - X = -C for symmetric C via the Kronecker linear system.
pub fn solve_discrete_lyapunov(
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n || c.nrows() != n || c.ncols() != n {
        return None;
    }
    // vec(M'XM) = (M' kron M') vec(X)
    let mt = m.transpose();
    let mut sys = mt.kronecker(&mt);
    for i in 0..n * n {
        sys[(i, i)] -= 1.0;
    }
    let rhs = DVector::from_iterator(n * n, c.iter().map(|v| -v));
    let sol = sys.lu().solve(&rhs)?;
    let x = DMatrix::from_iterator(n, n, sol.iter().cloned());
    Some((&x + x.transpose()) * 0.5)
}

/// Schur stability via a discrete Lyapunov certificate: M is stable iff
/// M'XM - X = -I has a symmetric positive-definite solution.
pub fn is_schur_stable(m: &DMatrix<f64>) -> StabilityCheck {
    let n = m.nrows();
    if m.ncols() != n {
        return StabilityCheck {
            stable: false,
            certificate: None,
            diagnostic: Some("matrix not square".to_string()),
        };
    }
    let ident = DMatrix::identity(n, n);
    match solve_discrete_lyapunov(m, &ident) {
        None => StabilityCheck {
            stable: false,
            certificate: None,
            diagnostic: Some("Lyapunov system singular (eigenvalue on the unit circle)".to_string()),
        },
        Some(x) => match x.clone().cholesky() {
            Some(_) => StabilityCheck {
                stable: true,
                certificate: Some(x),
                diagnostic: None,
            },
            None => StabilityCheck {
                stable: false,
                certificate: None,
                diagnostic: Some("Lyapunov solution not positive definite".to_string()),
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn double_integrator() -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.1, 0.9]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        )
    }

    #[test]
    fn dare_matches_reported_double_integrator_values() {
        let (a, b) = double_integrator();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let sol = solve_dare(&a, &b, &q, &r, 1e-12, 100_000).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 1.71, epsilon = 0.01);
        assert_abs_diff_eq!(sol.p[(0, 1)], -0.26, epsilon = 0.01);
        assert_abs_diff_eq!(sol.p[(1, 0)], -0.26, epsilon = 0.01);
        assert_abs_diff_eq!(sol.p[(1, 1)], 5.53, epsilon = 0.01);
        assert_abs_diff_eq!(sol.k[(0, 0)], -0.64, epsilon = 0.01);
        assert_abs_diff_eq!(sol.k[(0, 1)], -0.23, epsilon = 0.01);
        assert!(is_schur_stable(&sol.a_cl).stable);
    }

    #[test]
    fn dare_zero_dynamics_returns_q() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let sol = solve_dare(&a, &b, &q, &r, 1e-12, 100).unwrap();
        assert!((sol.p - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(sol.k.amax() < 1e-12);
    }

    #[test]
    fn dare_scalar_matches_quadratic_formula_oracle() {
        // a=2, b=1, q=r=1: the fixed point solves p^2 - 4p - 1 = 0.
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let sol = solve_dare(&a, &b, &q, &r, 1e-13, 100_000).unwrap();
        let p_oracle = 2.0 + 5.0f64.sqrt();
        assert_abs_diff_eq!(sol.p[(0, 0)], p_oracle, epsilon = 1e-9);
        let k_oracle = -2.0 * p_oracle / (1.0 + p_oracle);
        assert_abs_diff_eq!(sol.k[(0, 0)], k_oracle, epsilon = 1e-9);
    }

    #[test]
    fn dare_rejects_indefinite_r() {
        let (a, b) = double_integrator();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(
            solve_dare(&a, &b, &q, &r, 1e-12, 100),
            Err(LinalgError::RNotPositiveDefinite)
        ));
    }

    #[test]
    fn lqr_gain_zero_a_gives_zero_k() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let p = DMatrix::identity(2, 2);
        let k = lqr_gain(&a, &b, &r, &p).unwrap();
        assert!(k.amax() < 1e-14);
    }

    #[test]
    fn null_space_of_row_vector() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let basis = null_space_basis(&m, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 1);
        assert_abs_diff_eq!(basis[(0, 0)].abs(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(basis[(1, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn null_space_of_zero_matrix_spans_everything() {
        let m = DMatrix::zeros(2, 3);
        let basis = null_space_basis(&m, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 3);
        let gram = basis.transpose() * &basis;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn null_space_of_equilibrium_matrix() {
        let (a, b) = double_integrator();
        let mut m = DMatrix::zeros(2, 3);
        m.view_mut((0, 0), (2, 2))
            .copy_from(&(a - DMatrix::identity(2, 2)));
        m.view_mut((0, 2), (2, 1)).copy_from(&b);
        let basis = null_space_basis(&m, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 1);
        let residual = (&m * &basis).amax();
        assert!(residual <= 1e-10 * (1.0 + m.amax()));
        // Parallel to (1, -1, 0.5).
        let dir = DVector::from_vec(vec![1.0, -1.0, 0.5]).normalize();
        let b0 = basis.column(0).clone_owned();
        assert!(b0.dot(&dir).abs() > 1.0 - 1e-10);
    }

    #[test]
    fn schur_stability_trivial_cases() {
        let half = DMatrix::identity(2, 2) * 0.5;
        let check = is_schur_stable(&half);
        assert!(check.stable);
        let x = check.certificate.unwrap();
        assert!((x - DMatrix::identity(2, 2) * (4.0 / 3.0)).amax() < 1e-10);

        let id = DMatrix::identity(1, 1);
        let check = is_schur_stable(&id);
        assert!(!check.stable);
        assert!(check.diagnostic.is_some());
    }

    fn random_stabilizable(rng: &mut StdRng, m: usize, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        // Stable base + bounded perturbation keeps the pair stabilizable.
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = rng.gen_range(-0.3..0.3);
            }
            a[(i, i)] += rng.gen_range(-0.5..0.5);
        }
        let mut b = DMatrix::zeros(m, n);
        for v in b.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        (a, b)
    }

    #[test]
    fn dare_random_systems_converge_and_stabilize() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..30 {
            let m = rng.gen_range(1..=6);
            let n = rng.gen_range(1..=m);
            let (a, b) = random_stabilizable(&mut rng, m, n);
            let q = DMatrix::identity(m, m);
            let r = DMatrix::identity(n, n);
            let sol = solve_dare(&a, &b, &q, &r, 1e-12, 100_000).unwrap();
            // Fixed-point residual bound.
            let s = &r + b.transpose() * &sol.p * &b;
            let rhs = b.transpose() * &sol.p * &a;
            let inner = s.lu().solve(&rhs).unwrap();
            let res = a.transpose() * &sol.p * &a + &q - a.transpose() * &sol.p * &b * inner
                - &sol.p;
            assert!(res.amax() < 1e-10, "residual {}", res.amax());
            assert!(is_schur_stable(&sol.a_cl).stable);
        }
    }

    #[test]
    fn null_space_random_orthonormality() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let rows = rng.gen_range(1..=4);
            let cols = rng.gen_range(1..=6);
            let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
            let basis = null_space_basis(&m, 1e-10).unwrap();
            if basis.ncols() > 0 {
                let gram = basis.transpose() * &basis;
                assert!((gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax() < 1e-10);
                assert!((&m * &basis).amax() <= 1e-10 * (1.0 + m.amax()));
            }
        }
    }

    #[test]
    fn invertible_a_minus_i_gives_nullity_n() {
        let (a, b) = double_integrator();
        // A - I is invertible here (det = 0.05).
        let mut m = DMatrix::zeros(2, 3);
        m.view_mut((0, 0), (2, 2))
            .copy_from(&(a - DMatrix::identity(2, 2)));
        m.view_mut((0, 2), (2, 1)).copy_from(&b);
        let basis = null_space_basis(&m, 1e-10).unwrap();
        assert_eq!(basis.ncols(), b.ncols());
    }
}

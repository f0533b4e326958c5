//! Condensed finite-horizon MPC: the ground-truth control law and the
//! training-data generator built on it.

use crate::polytope::{HPolytope, PolytopeError};
use crate::qp::{self, QpProblem, SolveStatus};
use crate::system::LtiSystem;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("terminal set is not contained in the state constraint set")]
    TerminalNotInState,
    #[error("polytope error: {0}")]
    Polytope(#[from] PolytopeError),
    #[error("QP construction failed: {0}")]
    Qp(#[from] qp::QpError),
    #[error("sample count must be at least 1")]
    EmptySampleRequest,
    #[error("sampling acceptance rate below 0.1%; check the constraint configuration")]
    AcceptanceFloor,
}

/// Stage weights, terminal weight, horizon, and constraint sets.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub horizon: usize,
    pub terminal_set: HPolytope,
}

/// Condensed QP over the stacked input sequence. For initial state x0
/// the constraint offsets are `g_offset - g_x0_map * x0` and the linear
/// cost is `f_map * x0`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub sx: DMatrix<f64>,
    pub su: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub f_map: DMatrix<f64>,
    pub const_map: DMatrix<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_offset: DVector<f64>,
    pub g_x0_map: DMatrix<f64>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    x_set: HPolytope,
}

/// One supervised training pair: state, first MPC input, optimal cost.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u0: DVector<f64>,
    pub u_seq: DVector<f64>,
    pub value: f64,
    pub feasible: bool,
}

/// Builds the condensed QP: stacked predictions X = Sx x0 + Su U with
/// X = (x_1, ..., x_N), cost Hessian H = 2 (Su' Qbar Su + Rbar).
pub fn condense(system: &LtiSystem, config: &MpcConfig) -> Result<CondensedQp, MpcError> {
    let m = system.state_dim();
    let nu = system.input_dim();
    let n = config.horizon;
    if n == 0 {
        return Err(MpcError::ZeroHorizon);
    }
    if config.q.nrows() != m || config.q.ncols() != m || config.p.nrows() != m {
        return Err(MpcError::DimensionMismatch("Q/P vs state".into()));
    }
    if config.r.nrows() != nu || config.r.ncols() != nu {
        return Err(MpcError::DimensionMismatch("R vs input".into()));
    }
    if config.terminal_set.dim() != m {
        return Err(MpcError::DimensionMismatch("terminal set vs state".into()));
    }
    if !config
        .terminal_set
        .contained_in(&system.x_set, crate::polytope::SET_EQUAL_TOL)?
    {
        return Err(MpcError::TerminalNotInState);
    }

    // A-powers: powers[k] = A^k, k = 0..N.
    let mut powers: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    powers.push(DMatrix::identity(m, m));
    for k in 0..n {
        powers.push(&powers[k] * &system.a);
    }
    let mut sx = DMatrix::zeros(n * m, m);
    let mut su = DMatrix::zeros(n * m, n * nu);
    for i in 1..=n {
        sx.view_mut(((i - 1) * m, 0), (m, m)).copy_from(&powers[i]);
        for j in 0..i {
            let block = &powers[i - 1 - j] * &system.b;
            su.view_mut(((i - 1) * m, j * nu), (m, nu)).copy_from(&block);
        }
    }

    // Qbar = blkdiag(Q, ..., Q, P) over x_1..x_N.
    let mut qbar = DMatrix::zeros(n * m, n * m);
    for k in 0..n - 1 {
        qbar.view_mut((k * m, k * m), (m, m)).copy_from(&config.q);
    }
    qbar.view_mut(((n - 1) * m, (n - 1) * m), (m, m))
        .copy_from(&config.p);
    let mut rbar = DMatrix::zeros(n * nu, n * nu);
    for k in 0..n {
        rbar.view_mut((k * nu, k * nu), (nu, nu)).copy_from(&config.r);
    }

    let hessian = (su.transpose() * &qbar * &su + &rbar) * 2.0;
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let f_map = su.transpose() * &qbar * &sx * 2.0;
    let const_map = &config.q + sx.transpose() * &qbar * &sx;

    // Constraint rows over U, parameterized by x0:
    //   x_k in X for k = 1..N-1, u_k in U for k = 0..N-1, x_N in Xf.
    let hx = system.x_set.normals();
    let hxv = system.x_set.offsets();
    let hu = system.u_set.normals();
    let huv = system.u_set.offsets();
    let hf = config.terminal_set.normals();
    let hfv = config.terminal_set.offsets();
    let rows = (n - 1) * hx.nrows() + n * hu.nrows() + hf.nrows();
    let mut g_mat = DMatrix::zeros(rows, n * nu);
    let mut g_offset = DVector::zeros(rows);
    let mut g_x0_map = DMatrix::zeros(rows, m);
    let mut r = 0;
    for k in 1..n {
        let su_block = su.view(((k - 1) * m, 0), (m, n * nu));
        let sx_block = sx.view(((k - 1) * m, 0), (m, m));
        let rows_k = hx * su_block;
        let x0_k = hx * sx_block;
        g_mat.view_mut((r, 0), (hx.nrows(), n * nu)).copy_from(&rows_k);
        g_x0_map.view_mut((r, 0), (hx.nrows(), m)).copy_from(&x0_k);
        g_offset.rows_mut(r, hx.nrows()).copy_from(hxv);
        r += hx.nrows();
    }
    for k in 0..n {
        g_mat
            .view_mut((r, k * nu), (hu.nrows(), nu))
            .copy_from(hu);
        g_offset.rows_mut(r, hu.nrows()).copy_from(huv);
        r += hu.nrows();
    }
    {
        let su_block = su.view(((n - 1) * m, 0), (m, n * nu));
        let sx_block = sx.view(((n - 1) * m, 0), (m, m));
        let rows_f = hf * su_block;
        let x0_f = hf * sx_block;
        g_mat.view_mut((r, 0), (hf.nrows(), n * nu)).copy_from(&rows_f);
        g_x0_map.view_mut((r, 0), (hf.nrows(), m)).copy_from(&x0_f);
        g_offset.rows_mut(r, hf.nrows()).copy_from(hfv);
    }

    Ok(CondensedQp {
        sx,
        su,
        hessian,
        f_map,
        const_map,
        g_mat,
        g_offset,
        g_x0_map,
        state_dim: m,
        input_dim: nu,
        horizon: n,
        x_set: system.x_set.clone(),
    })
}

impl CondensedQp {
    /// Stacked predicted states for a given x0 and input sequence.
    pub fn predict(&self, x0: &DVector<f64>, u_seq: &DVector<f64>) -> DVector<f64> {
        &self.sx * x0 + &self.su * u_seq
    }

    pub fn qp_for(&self, x0: &DVector<f64>) -> Result<QpProblem, MpcError> {
        let q_lin = &self.f_map * x0;
        let g_vec = &self.g_offset - &self.g_x0_map * x0;
        Ok(QpProblem::new(
            self.hessian.clone(),
            q_lin,
            self.g_mat.clone(),
            g_vec,
        )?)
    }
}

/// Evaluates the MPC law at x0. The reported value includes the k = 0
/// stage cost x0' Q x0, matching the full finite-horizon objective.
pub fn kappa_mpc(cond: &CondensedQp, x0: &DVector<f64>) -> Result<MpcSolution, MpcError> {
    if x0.len() != cond.state_dim {
        return Err(MpcError::DimensionMismatch(format!(
            "x0 has length {} but the state dim is {}",
            x0.len(),
            cond.state_dim
        )));
    }
    let nu = cond.input_dim;
    if !cond.x_set.contains(x0, 1e-9)? {
        return Ok(MpcSolution {
            u0: DVector::zeros(nu),
            u_seq: DVector::zeros(cond.horizon * nu),
            value: f64::INFINITY,
            feasible: false,
        });
    }
    let problem = cond.qp_for(x0)?;
    let sol = qp::solve_qp(&problem, 1e-8);
    match sol.status {
        SolveStatus::Optimal => {
            let constant = (x0.transpose() * &cond.const_map * x0)[(0, 0)];
            // sol.objective = 1/2 U'HU + f'U; the full cost adds
            // x0' (Q + Sx'Qbar Sx) x0.
            Ok(MpcSolution {
                u0: sol.x.rows(0, nu).clone_owned(),
                u_seq: sol.x.clone(),
                value: sol.objective + constant,
                feasible: true,
            })
        }
        _ => Ok(MpcSolution {
            u0: DVector::zeros(nu),
            u_seq: DVector::zeros(cond.horizon * nu),
            value: f64::INFINITY,
            feasible: false,
        }),
    }
}

/// Draws states uniformly over X, keeping those where the MPC problem
/// is feasible. Deterministic per (seed, index).
pub fn sample_training_set(
    system: &LtiSystem,
    cond: &CondensedQp,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>, MpcError> {
    if n == 0 {
        return Err(MpcError::EmptySampleRequest);
    }
    let (lower, upper) = system.x_set.bounding_box()?;
    let dim = system.state_dim();
    let mut samples = Vec::with_capacity(n);
    let mut attempts_total = 0usize;
    for idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut found = None;
        for _ in 0..100_000 {
            attempts_total += 1;
            let x = DVector::from_fn(dim, |j, _| {
                use rand::Rng;
                rng.gen_range(lower[j]..=upper[j])
            });
            if !system.x_set.contains(&x, 0.0)? {
                continue;
            }
            let sol = kappa_mpc(cond, &x)?;
            if sol.feasible {
                found = Some(Sample {
                    x,
                    u: sol.u0,
                    value: sol.value,
                });
                break;
            }
            // Acceptance floor: fewer than 1 in 1000 accepted overall.
            if attempts_total > 10_000 && samples.len() * 1000 < attempts_total {
                return Err(MpcError::AcceptanceFloor);
            }
        }
        samples.push(found.ok_or(MpcError::AcceptanceFloor)?);
    }
    Ok(samples)
}

/// Dataset CSV: x_1..x_m, u_1..u_n, value.
pub fn dataset_to_csv(samples: &[Sample]) -> String {
    let mut out = String::new();
    if samples.is_empty() {
        return out;
    }
    let m = samples[0].x.len();
    let nu = samples[0].u.len();
    for i in 0..m {
        out.push_str(&format!("x{},", i + 1));
    }
    for i in 0..nu {
        out.push_str(&format!("u{},", i + 1));
    }
    out.push_str("value\n");
    for s in samples {
        for v in s.x.iter() {
            out.push_str(&format!("{v:.17e},"));
        }
        for v in s.u.iter() {
            out.push_str(&format!("{v:.17e},"));
        }
        out.push_str(&format!("{:.17e}\n", s.value));
    }
    out
}

pub fn dataset_from_csv(text: &str, state_dim: usize, input_dim: usize) -> Option<Vec<Sample>> {
    let mut lines = text.lines();
    let _header = lines.next()?;
    let mut samples = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .ok()?;
        if vals.len() != state_dim + input_dim + 1 {
            return None;
        }
        samples.push(Sample {
            x: DVector::from_vec(vals[..state_dim].to_vec()),
            u: DVector::from_vec(vals[state_dim..state_dim + input_dim].to_vec()),
            value: vals[state_dim + input_dim],
        });
    }
    Some(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::max_admissible_set;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn example1() -> (LtiSystem, MpcConfig) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.1, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let x_set = HPolytope::box_from_half_widths(&[5.0, 5.0]);
        let u_set = HPolytope::box_from_half_widths(&[1.0]);
        let sol = crate::linalg::solve_dare(
            &a,
            &b,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            1e-12,
            100_000,
        )
        .unwrap();
        let sigma = max_admissible_set(&a, &b, &sol.k, &x_set, &u_set, 200).unwrap();
        let system = LtiSystem::new(a, b, x_set, u_set).unwrap();
        let config = MpcConfig {
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            p: sol.p,
            horizon: 10,
            terminal_set: sigma.set,
        };
        (system, config)
    }

    #[test]
    fn scalar_one_step_unconstrained() {
        // a=b=q=r=p=1, N=1, x0=1: minimize u^2 + (1+u)^2 -> u = -0.5.
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let big = HPolytope::box_from_half_widths(&[1e5]);
        let system = LtiSystem::new(a, b, big.clone(), big.clone()).unwrap();
        let config = MpcConfig {
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            p: DMatrix::identity(1, 1),
            horizon: 1,
            terminal_set: big,
        };
        let cond = condense(&system, &config).unwrap();
        let sol = kappa_mpc(&cond, &DVector::from_vec(vec![1.0])).unwrap();
        assert!(sol.feasible);
        assert_abs_diff_eq!(sol.u0[0], -0.5, epsilon = 1e-7);
    }

    #[test]
    fn zero_input_prediction_is_free_response() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        let x0 = DVector::from_vec(vec![0.7, -0.3]);
        let pred = cond.predict(&x0, &DVector::zeros(10));
        let mut x = x0.clone();
        for k in 0..10 {
            x = &system.a * x;
            assert!((pred.rows(k * 2, 2) - &x).amax() < 1e-12);
        }
    }

    #[test]
    fn condensed_prediction_matches_forward_simulation() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let u_seq = DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0));
            let pred = cond.predict(&x0, &u_seq);
            let mut x = x0.clone();
            for k in 0..10 {
                x = system.step(&x, &DVector::from_vec(vec![u_seq[k]]));
                assert!((pred.rows(k * 2, 2) - &x).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn origin_maps_to_zero_cost_and_input() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        let sol = kappa_mpc(&cond, &DVector::zeros(2)).unwrap();
        assert!(sol.feasible);
        assert!(sol.u0[0].abs() < 1e-7);
        assert!(sol.value.abs() < 1e-7);
    }

    #[test]
    fn linear_law_inside_terminal_set() {
        let (system, config) = example1();
        let k = crate::linalg::solve_dare(
            &system.a,
            &system.b,
            &config.q,
            &config.r,
            1e-12,
            100_000,
        )
        .unwrap()
        .k;
        let cond = condense(&system, &config).unwrap();
        let pts = config.terminal_set.sample_uniform(50, 99).unwrap();
        for x in pts {
            let sol = kappa_mpc(&cond, &x).unwrap();
            assert!(sol.feasible);
            let lin = &k * &x;
            assert!(
                (sol.u0[0] - lin[0]).abs() <= 1e-4,
                "kappa {} vs Kx {}",
                sol.u0[0],
                lin[0]
            );
        }
    }

    #[test]
    fn infeasible_outside_feasibility_region() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        // Corner of X, far outside X_10 for this system.
        let sol = kappa_mpc(&cond, &DVector::from_vec(vec![5.0, 5.0])).unwrap();
        assert!(!sol.feasible);
    }

    #[test]
    fn sampling_yields_feasible_pairs() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        let samples = sample_training_set(&system, &cond, 50, 4).unwrap();
        assert_eq!(samples.len(), 50);
        for s in &samples {
            let recheck = kappa_mpc(&cond, &s.x).unwrap();
            assert!(recheck.feasible);
            assert!(system.u_set.contains(&s.u, 1e-7).unwrap());
            assert!(s.value >= -1e-9);
        }
        assert!(matches!(
            sample_training_set(&system, &cond, 0, 4),
            Err(MpcError::EmptySampleRequest)
        ));
    }

    #[test]
    fn terminal_state_lands_in_terminal_set() {
        let (system, config) = example1();
        let cond = condense(&system, &config).unwrap();
        let samples = sample_training_set(&system, &cond, 20, 8).unwrap();
        for s in &samples {
            let sol = kappa_mpc(&cond, &s.x).unwrap();
            let pred = cond.predict(&s.x, &sol.u_seq);
            let xn = pred.rows(9 * 2, 2).clone_owned();
            assert!(config.terminal_set.contains(&xn, 1e-6).unwrap());
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let samples = vec![Sample {
            x: DVector::from_vec(vec![0.5, -1.25]),
            u: DVector::from_vec(vec![0.125]),
            value: 3.5,
        }];
        let csv = dataset_to_csv(&samples);
        let parsed = dataset_from_csv(&csv, 2, 1).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].x.as_slice(), samples[0].x.as_slice());
        assert_eq!(parsed[0].u.as_slice(), samples[0].u.as_slice());
        assert_eq!(parsed[0].value, samples[0].value);
    }
}

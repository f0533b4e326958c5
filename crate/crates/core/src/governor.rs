//! Online safety layer: equilibrium parameterization, statically
//! admissible command set, augmented admissible set in (x, gamma), and
//! the per-step governor QP with the constant-command fallback that
//! keeps the loop recursively feasible.

use crate::linalg::{self, LinalgError};
use crate::polytope::{self, HPolytope, PolytopeError, SET_EQUAL_TOL};
use crate::qp::{self, QpProblem, SolveStatus};
use crate::system::LtiSystem;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GovernorError {
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
    #[error("polytope failure: {0}")]
    Polytope(#[from] PolytopeError),
    #[error("QP failure: {0}")]
    Qp(#[from] qp::QpError),
    #[error("equilibrium subspace is trivial (nullity 0)")]
    NoEquilibria,
    #[error("command set excludes the origin; constraint configuration is inconsistent")]
    CommandSetExcludesOrigin,
    #[error("gamma = 0 slice of the augmented set does not match the maximal admissible set")]
    SliceMismatch,
    #[error("state outside the governed domain (no feasible command and no stored fallback)")]
    OutOfDomain,
    #[error("epsilon must lie in (0, 1)")]
    BadEpsilon,
    #[error("weight s must be positive")]
    BadWeight,
}

/// Orthonormal basis of the equilibrium subspace ker [A - I, B], split
/// into state and input blocks: x_s = Mx gamma, u_s = Mu gamma.
#[derive(Debug, Clone)]
pub struct EquilibriumParam {
    pub mx: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub dim: usize,
}

pub fn equilibrium_basis(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<EquilibriumParam, GovernorError> {
    let m = a.nrows();
    let n = b.ncols();
    let mut stacked = DMatrix::zeros(m, m + n);
    stacked
        .view_mut((0, 0), (m, m))
        .copy_from(&(a - DMatrix::identity(m, m)));
    stacked.view_mut((0, m), (m, n)).copy_from(b);
    let basis = linalg::null_space_basis(&stacked, 1e-10)?;
    let p = basis.ncols();
    if p == 0 {
        return Err(GovernorError::NoEquilibria);
    }
    Ok(EquilibriumParam {
        mx: basis.rows(0, m).clone_owned(),
        mu: basis.rows(m, n).clone_owned(),
        dim: p,
    })
}

/// Statically admissible commands and whether the set is bounded.
#[derive(Debug, Clone)]
pub struct CommandSet {
    pub set: HPolytope,
    pub bounded: bool,
}

/// Gamma = {gamma : Mx gamma in X, Mu gamma in U}, redundancy-pruned.
pub fn command_set(
    param: &EquilibriumParam,
    x_set: &HPolytope,
    u_set: &HPolytope,
) -> Result<CommandSet, GovernorError> {
    let p = param.dim;
    let rows_x = x_set.normals() * &param.mx;
    let rows_u = u_set.normals() * &param.mu;
    let total = rows_x.nrows() + rows_u.nrows();
    let mut normals = DMatrix::zeros(total, p);
    normals.view_mut((0, 0), (rows_x.nrows(), p)).copy_from(&rows_x);
    normals
        .view_mut((rows_x.nrows(), 0), (rows_u.nrows(), p))
        .copy_from(&rows_u);
    let mut offsets = DVector::zeros(total);
    offsets.rows_mut(0, rows_x.nrows()).copy_from(x_set.offsets());
    offsets
        .rows_mut(rows_x.nrows(), rows_u.nrows())
        .copy_from(u_set.offsets());
    let raw = HPolytope::new(normals, offsets)?;
    if !raw.contains(&DVector::zeros(p), 0.0)? {
        return Err(GovernorError::CommandSetExcludesOrigin);
    }
    let bounded = raw.bounding_box().is_ok();
    let set = if bounded { raw.remove_redundant()? } else { raw };
    Ok(CommandSet { set, bounded })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GovernStatus {
    Optimal,
    Fallback,
}

/// Immutable governed-controller model; shareable across control loops.
#[derive(Debug, Clone)]
pub struct GovernorModel {
    pub gain: DMatrix<f64>,
    pub mx: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub m_gamma: DMatrix<f64>,
    pub gamma_set: HPolytope,
    pub aug_set: HPolytope,
    pub sigma_inf: HPolytope,
    pub weight: f64,
    pub gamma_dim: usize,
    /// Recursion depth at which the admissible set was finitely determined.
    pub sigma_determination: usize,
    /// Same for the augmented set.
    pub aug_determination: usize,
}

/// Per-control-loop state: the last successfully applied command.
#[derive(Debug, Clone, Default)]
pub struct GovernorState {
    pub gamma_prev: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct GovernOutcome {
    pub u: DVector<f64>,
    pub gamma: DVector<f64>,
    pub status: GovernStatus,
}

/// Builds the governor: equilibrium basis, command set, M_gamma, the
/// augmented admissible set, and the gamma = 0 slice validation.
pub fn build_governor(
    system: &LtiSystem,
    gain: &DMatrix<f64>,
    weight: f64,
    epsilon: f64,
) -> Result<GovernorModel, GovernorError> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(GovernorError::BadEpsilon);
    }
    if weight <= 0.0 {
        return Err(GovernorError::BadWeight);
    }
    let param = equilibrium_basis(&system.a, &system.b)?;
    let commands = command_set(&param, &system.x_set, &system.u_set)?;
    let m_gamma = &param.mu - gain * &param.mx;
    let sigma = polytope::max_admissible_set(
        &system.a,
        &system.b,
        gain,
        &system.x_set,
        &system.u_set,
        500,
    )?;
    let aug = polytope::max_admissible_set_aug(
        &system.a,
        &system.b,
        gain,
        &m_gamma,
        &system.x_set,
        &system.u_set,
        &commands.set,
        epsilon,
        500,
    )?;
    // Validate Sigma_inf = Sigma_inf(0) before returning.
    let slice = aug
        .set
        .fix_last_coords(&DVector::zeros(param.dim))?
        .remove_redundant()?;
    if !slice.set_equal(&sigma.set, SET_EQUAL_TOL)? {
        return Err(GovernorError::SliceMismatch);
    }
    Ok(GovernorModel {
        gain: gain.clone(),
        mx: param.mx,
        mu: param.mu,
        m_gamma,
        gamma_set: commands.set,
        aug_set: aug.set,
        sigma_inf: sigma.set,
        weight,
        gamma_dim: param.dim,
        sigma_determination: sigma.determination_index,
        aug_determination: aug.determination_index,
    })
}

impl GovernorModel {
    /// Constraint rows on gamma at a fixed state x.
    fn gamma_rows(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let m = x.len();
        let lead = self.aug_set.normals().columns(0, m).clone_owned();
        let tail = self
            .aug_set
            .normals()
            .columns(m, self.gamma_dim)
            .clone_owned();
        let rhs = self.aug_set.offsets() - lead * x;
        (tail, rhs)
    }

    /// True iff some command makes (x, gamma) admissible.
    pub fn membership(&self, x: &DVector<f64>) -> Result<bool, GovernorError> {
        let (rows, rhs) = self.gamma_rows(x);
        let gamma_poly = HPolytope::new(rows, rhs)?;
        Ok(!gamma_poly.is_empty()?)
    }
}

/// Pulls a command back inside rows * gamma <= rhs. The QP solver only
/// guarantees feasibility up to its tolerance, which is not enough when the
/// state sits on the boundary of the admissible region; without this step a
/// governed input can overshoot the input box by the solver residual.
/// Scalar commands are clamped exactly; larger command spaces use cyclic
/// projection onto the violated half-spaces.
fn restore_feasible(
    rows: &DMatrix<f64>,
    rhs: &DVector<f64>,
    gamma: DVector<f64>,
) -> DVector<f64> {
    if gamma.len() == 1 {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..rows.nrows() {
            let a = rows[(i, 0)];
            if a > 1e-14 {
                hi = hi.min(rhs[i] / a);
            } else if a < -1e-14 {
                lo = lo.max(rhs[i] / a);
            }
        }
        if lo > hi {
            // Numerically a single point; split the rounding gap.
            return DVector::from_element(1, 0.5 * (lo + hi));
        }
        return DVector::from_element(1, gamma[0].clamp(lo, hi));
    }
    let mut g = gamma;
    for _ in 0..100 {
        let mut worst = 0.0f64;
        for i in 0..rows.nrows() {
            let row = rows.row(i);
            let viol = row.dot(&g.transpose()) - rhs[i];
            let norm2 = row.norm_squared();
            if viol > 0.0 && norm2 > 1e-20 {
                worst = worst.max(viol);
                g -= row.transpose() * (viol / norm2);
            }
        }
        if worst <= 1e-13 {
            break;
        }
    }
    g
}

/// One governor step: minimize weight * ||K x + M_gamma gamma - u_nn||^2
/// over commands keeping (x, gamma) in the augmented admissible set.
/// Falls back to the stored previous command when the QP reports
/// infeasibility, which Theorem-style invariance keeps admissible.
pub fn govern(
    model: &GovernorModel,
    state: &mut GovernorState,
    x: &DVector<f64>,
    u_nn: &DVector<f64>,
) -> Result<GovernOutcome, GovernorError> {
    let (rows, rhs) = model.gamma_rows(x);
    let kx = &model.gain * x;
    let residual = &kx - u_nn;
    let hessian = (model.m_gamma.transpose() * &model.m_gamma) * (2.0 * model.weight);
    let linear = model.m_gamma.transpose() * &residual * (2.0 * model.weight);
    let problem = QpProblem::new(hessian, linear, rows, rhs)?;
    let sol = qp::solve_qp(&problem, 1e-9);
    let (rows, rhs) = (problem.g_mat.clone(), problem.g_vec.clone());
    match sol.status {
        SolveStatus::Optimal => {
            let gamma = restore_feasible(&rows, &rhs, sol.x);
            let u = &kx + &model.m_gamma * &gamma;
            state.gamma_prev = Some(gamma.clone());
            Ok(GovernOutcome {
                u,
                gamma,
                status: GovernStatus::Optimal,
            })
        }
        _ => {
            let gamma = match &state.gamma_prev {
                Some(gamma) => Some(restore_feasible(&rows, &rhs, gamma.clone())),
                // On the boundary of the admissible region the command set
                // degenerates to a point; the QP can misreport that as
                // infeasible. Its Chebyshev center is still a valid command.
                None => match HPolytope::new(rows.clone(), rhs.clone()) {
                    Ok(poly) => match poly.chebyshev_center() {
                        Ok((center, radius)) if radius > -1e-9 => {
                            Some(restore_feasible(&rows, &rhs, center))
                        }
                        _ => None,
                    },
                    Err(_) => None,
                },
            };
            match gamma {
                Some(gamma) => {
                    let u = &kx + &model.m_gamma * &gamma;
                    state.gamma_prev = Some(gamma.clone());
                    Ok(GovernOutcome {
                        u,
                        gamma,
                        status: GovernStatus::Fallback,
                    })
                }
                None => Err(GovernorError::OutOfDomain),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_dare;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example1_system() -> (LtiSystem, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.1, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let x_set = HPolytope::box_from_half_widths(&[5.0, 5.0]);
        let u_set = HPolytope::box_from_half_widths(&[1.0]);
        let sol = solve_dare(
            &a,
            &b,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            1e-12,
            100_000,
        )
        .unwrap();
        (LtiSystem::new(a, b, x_set, u_set).unwrap(), sol.k)
    }

    #[test]
    fn scalar_equilibrium_direction() {
        // A = 0.5, B = 1: x_s = 2 u_s, direction (2, 1)/sqrt(5).
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let param = equilibrium_basis(&a, &b).unwrap();
        assert_eq!(param.dim, 1);
        let ratio = param.mx[(0, 0)] / param.mu[(0, 0)];
        assert_abs_diff_eq!(ratio, 2.0, epsilon = 1e-10);
        let norm = (param.mx[(0, 0)].powi(2) + param.mu[(0, 0)].powi(2)).sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn example1_equilibrium_residual() {
        let (system, _) = example1_system();
        let param = equilibrium_basis(&system.a, &system.b).unwrap();
        assert_eq!(param.dim, 1);
        let residual = (&system.a - DMatrix::identity(2, 2)) * &param.mx + &system.b * &param.mu;
        assert!(residual.amax() <= 1e-10);
        // Parallel to (1, -1, 0.5).
        let dir = DVector::from_vec(vec![1.0, -1.0, 0.5]).normalize();
        let stacked = DVector::from_vec(vec![
            param.mx[(0, 0)],
            param.mx[(1, 0)],
            param.mu[(0, 0)],
        ]);
        assert!(stacked.dot(&dir).abs() > 1.0 - 1e-10);
    }

    #[test]
    fn example1_command_set_is_interval() {
        let (system, _) = example1_system();
        let param = equilibrium_basis(&system.a, &system.b).unwrap();
        let commands = command_set(&param, &system.x_set, &system.u_set).unwrap();
        assert!(commands.bounded);
        // 1-D grid oracle over both row families.
        let scale = param.mu[(0, 0)].abs();
        let expected_hw = 1.0 / scale; // |Mu gamma| <= 1 binds first.
        let (lower, upper) = commands.set.bounding_box().unwrap();
        assert_abs_diff_eq!(upper[0], expected_hw, epsilon = 1e-6);
        assert_abs_diff_eq!(lower[0], -expected_hw, epsilon = 1e-6);
        assert!(commands
            .set
            .contains(&DVector::zeros(1), 0.0)
            .unwrap());
    }

    #[test]
    fn degenerate_basis_flags_unbounded() {
        let param = EquilibriumParam {
            mx: DMatrix::zeros(2, 1),
            mu: DMatrix::zeros(1, 1),
            dim: 1,
        };
        let x_set = HPolytope::box_from_half_widths(&[1.0, 1.0]);
        let u_set = HPolytope::box_from_half_widths(&[1.0]);
        let commands = command_set(&param, &x_set, &u_set).unwrap();
        assert!(!commands.bounded);
    }

    #[test]
    fn build_governor_validates_slice_equality() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        assert_eq!(model.gamma_dim, 1);
        // M_gamma identity: Mu - K Mx within 1e-10.
        let expected = &model.mu - &k * &model.mx;
        assert!((expected - &model.m_gamma).amax() <= 1e-10);
        let slice = model
            .aug_set
            .fix_last_coords(&DVector::zeros(1))
            .unwrap()
            .remove_redundant()
            .unwrap();
        assert!(slice.set_equal(&model.sigma_inf, 1e-8).unwrap());
    }

    #[test]
    fn membership_basics() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        assert!(model.membership(&DVector::zeros(2)).unwrap());
        assert!(!model.membership(&DVector::from_vec(vec![6.0, 0.0])).unwrap());
    }

    #[test]
    fn membership_matches_projection_oracle_on_grid() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let projected = model.aug_set.project_eliminate(&[2]).unwrap();
        let mut checked = 0;
        for i in 0..21 {
            for j in 0..21 {
                let x = DVector::from_vec(vec![
                    -5.0 + 10.0 * i as f64 / 20.0,
                    -5.0 + 10.0 * j as f64 / 20.0,
                ]);
                // Skip boundary-ambiguous grid points.
                let margin = (projected.normals() * &x - projected.offsets())
                    .iter()
                    .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                if margin < 1e-6 {
                    continue;
                }
                let by_lp = model.membership(&x).unwrap();
                let by_proj = projected.contains(&x, 1e-9).unwrap();
                assert_eq!(by_lp, by_proj, "x = {x:?}");
                checked += 1;
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn govern_zero_objective_inside_sigma() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        assert!(model.sigma_inf.contains(&x, 0.0).unwrap());
        let u_nn = &k * &x;
        let mut state = GovernorState::default();
        let out = govern(&model, &mut state, &x, &u_nn).unwrap();
        assert_eq!(out.status, GovernStatus::Optimal);
        assert!(out.gamma.amax() < 1e-6);
        assert!((out.u - u_nn).amax() < 1e-6);
    }

    #[test]
    fn govern_clamps_absurd_suggestion_to_grid_oracle() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let pts = model.sigma_inf.sample_uniform(20, 31).unwrap();
        for x in pts {
            let u_nn = DVector::from_vec(vec![100.0]);
            let mut state = GovernorState::default();
            let out = govern(&model, &mut state, &x, &u_nn).unwrap();
            assert!(system.u_set.contains(&out.u, 1e-7).unwrap());
            // 1-D grid-search oracle over feasible gamma.
            let m = x.len();
            let lead = model.aug_set.normals().columns(0, m).clone_owned();
            let tail = model.aug_set.normals().column(m).clone_owned();
            let rhs = model.aug_set.offsets() - lead * &x;
            let mut lo = -1e9f64;
            let mut hi = 1e9f64;
            for i in 0..tail.len() {
                if tail[i] > 1e-12 {
                    hi = hi.min(rhs[i] / tail[i]);
                } else if tail[i] < -1e-12 {
                    lo = lo.max(rhs[i] / tail[i]);
                }
            }
            assert!(hi >= lo);
            let kx = (&k * &x)[0];
            let mg = model.m_gamma[(0, 0)];
            let mut best_u = f64::NAN;
            let mut best = f64::INFINITY;
            for i in 0..=10_000 {
                let g = lo + (hi - lo) * i as f64 / 10_000.0;
                let u = kx + mg * g;
                let cost = (u - 100.0).powi(2);
                if cost < best {
                    best = cost;
                    best_u = u;
                }
            }
            assert!(
                (out.u[0] - best_u).abs() <= 1e-4,
                "governed {} vs oracle {}",
                out.u[0],
                best_u
            );
        }
    }

    #[test]
    fn govern_out_of_domain_without_fallback() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let mut state = GovernorState::default();
        let x = DVector::from_vec(vec![20.0, 20.0]);
        let res = govern(&model, &mut state, &x, &DVector::zeros(1));
        assert!(matches!(res, Err(GovernorError::OutOfDomain)));
    }

    #[test]
    fn weight_scaling_leaves_command_unchanged() {
        let (system, k) = example1_system();
        let model1 = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let model2 = build_governor(&system, &k, 250.0, 1e-6).unwrap();
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let u_nn = DVector::from_vec(vec![0.7]);
        let mut s1 = GovernorState::default();
        let mut s2 = GovernorState::default();
        let o1 = govern(&model1, &mut s1, &x, &u_nn).unwrap();
        let o2 = govern(&model2, &mut s2, &x, &u_nn).unwrap();
        assert!((o1.u - o2.u).amax() < 1e-6);
    }

    #[test]
    fn recursive_feasibility_fuzz_small() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let projected = model.aug_set.project_eliminate(&[2]).unwrap();
        let starts = projected.sample_uniform(20, 5150).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for x0 in starts {
            let mut x = x0.clone();
            let mut state = GovernorState::default();
            for t in 0..50 {
                let u_nn = DVector::from_vec(vec![rng.gen_range(-30.0..30.0)]);
                let out = govern(&model, &mut state, &x, &u_nn)
                    .unwrap_or_else(|e| panic!("step {t} from {x0:?}: {e}"));
                assert!(system.u_set.contains(&out.u, 1e-7).unwrap());
                x = system.step(&x, &out.u);
                assert!(system.x_set.contains(&x, 1e-7).unwrap());
            }
        }
    }

    #[test]
    fn idle_fixed_point_at_origin() {
        let (system, k) = example1_system();
        let model = build_governor(&system, &k, 1.0, 1e-6).unwrap();
        let mut state = GovernorState::default();
        let mut x = DVector::zeros(2);
        for _ in 0..5 {
            let out = govern(&model, &mut state, &x, &DVector::zeros(1)).unwrap();
            assert!(out.u.amax() < 1e-9);
            x = system.step(&x, &out.u);
            assert!(x.amax() < 1e-12);
        }
    }
}

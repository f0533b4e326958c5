//! Closed-loop simulation: policy trait, trajectory recording with
//! constraint-violation flags and per-step wall-clock timings, plus the
//! stock policies (zero, linear feedback, receding-horizon MPC,
//! dual-mode network, governed network, projection baseline).

use crate::governor::{self, GovernStatus, GovernorError, GovernorModel, GovernorState};
use crate::mpc::{self, CondensedQp, MpcError};
use crate::nn::{DualModeController, NnError};
use crate::qp::{self, QpProblem, SolveStatus};
use crate::system::LtiSystem;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;
use thiserror::Error;

pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("MPC oracle failed: {0}")]
    Mpc(#[from] MpcError),
    #[error("MPC problem infeasible at the current state")]
    MpcInfeasible,
    #[error("network evaluation failed: {0}")]
    Nn(#[from] NnError),
    #[error("governor failed: {0}")]
    Governor(#[from] GovernorError),
    #[error("projection fallback failed: {0:?}")]
    ProjectionFailed(SolveStatus),
    #[error("dimension mismatch in simulation: {0}")]
    DimensionMismatch(String),
}

/// Per-step annotation recorded alongside the applied input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Nominal,
    /// Governor reused the previously admissible command.
    Fallback,
    /// Projection was infeasible; raw input was clipped to the input set only.
    Clipped,
}

pub trait Policy {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError>;
    fn name(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub statuses: Vec<StepStatus>,
    /// Seconds spent inside the policy per step.
    pub step_times: Vec<f64>,
    /// Step indices where the applied input or successor state left the
    /// constraint sets by more than the tolerance.
    pub violations: Vec<usize>,
    /// False when the policy errored before reaching the step budget.
    pub completed: bool,
    pub error: Option<String>,
}

impl Trajectory {
    pub fn steps_taken(&self) -> usize {
        self.inputs.len()
    }

    pub fn mean_step_time(&self) -> f64 {
        if self.step_times.is_empty() {
            0.0
        } else {
            self.step_times.iter().sum::<f64>() / self.step_times.len() as f64
        }
    }

    pub fn terminal_norm(&self) -> f64 {
        self.states.last().map(|x| x.norm()).unwrap_or(f64::NAN)
    }
}

/// Simulates x+ = A x + B u under the policy for `steps` steps,
/// recording violations instead of aborting on them. A policy error
/// terminates the run and leaves the partial trajectory intact.
pub fn run_closed_loop(
    system: &LtiSystem,
    policy: &mut dyn Policy,
    x0: &DVector<f64>,
    steps: usize,
) -> Trajectory {
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        statuses: Vec::new(),
        step_times: Vec::new(),
        violations: Vec::new(),
        completed: false,
        error: None,
    };
    let mut x = x0.clone();
    for t in 0..steps {
        let start = Instant::now();
        let (u, status) = match policy.control(&x) {
            Ok(pair) => pair,
            Err(e) => {
                traj.error = Some(e.to_string());
                return traj;
            }
        };
        traj.step_times.push(start.elapsed().as_secs_f64());
        let next = system.step(&x, &u);
        let u_ok = system.u_set.contains(&u, VIOLATION_TOL).unwrap_or(false);
        let x_ok = system
            .x_set
            .contains(&next, VIOLATION_TOL)
            .unwrap_or(false);
        if !u_ok || !x_ok {
            traj.violations.push(t);
        }
        traj.inputs.push(u);
        traj.statuses.push(status);
        traj.states.push(next.clone());
        x = next;
    }
    traj.completed = true;
    traj
}

pub struct ZeroPolicy {
    pub input_dim: usize,
}

impl Policy for ZeroPolicy {
    fn control(&mut self, _x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        Ok((DVector::zeros(self.input_dim), StepStatus::Nominal))
    }

    fn name(&self) -> String {
        "zero".into()
    }
}

pub struct LinearPolicy {
    pub gain: DMatrix<f64>,
}

impl Policy for LinearPolicy {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        Ok((&self.gain * x, StepStatus::Nominal))
    }

    fn name(&self) -> String {
        "lqr".into()
    }
}

pub struct MpcPolicy {
    pub cond: CondensedQp,
}

impl Policy for MpcPolicy {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        let sol = mpc::kappa_mpc(&self.cond, x)?;
        if !sol.feasible {
            return Err(SimError::MpcInfeasible);
        }
        Ok((sol.u0, StepStatus::Nominal))
    }

    fn name(&self) -> String {
        "mpc".into()
    }
}

pub struct DualModePolicy {
    pub controller: DualModeController,
}

impl Policy for DualModePolicy {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        Ok((self.controller.eval(x)?, StepStatus::Nominal))
    }

    fn name(&self) -> String {
        "dual-mode".into()
    }
}

/// Wraps any raw policy with the safety governor.
pub struct GovernedPolicy<P: Policy> {
    pub raw: P,
    pub model: GovernorModel,
    pub state: GovernorState,
}

impl<P: Policy> GovernedPolicy<P> {
    pub fn new(raw: P, model: GovernorModel) -> Self {
        GovernedPolicy {
            raw,
            model,
            state: GovernorState::default(),
        }
    }
}

impl<P: Policy> Policy for GovernedPolicy<P> {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        let (u_raw, _) = self.raw.control(x)?;
        let out = governor::govern(&self.model, &mut self.state, x, &u_raw)?;
        let status = match out.status {
            GovernStatus::Optimal => StepStatus::Nominal,
            GovernStatus::Fallback => StepStatus::Fallback,
        };
        Ok((out.u, status))
    }

    fn name(&self) -> String {
        format!("governed({})", self.raw.name())
    }
}

/// Naive baseline: project the raw input onto
/// {u in U : A x + B u in X}. When that set is empty the raw input is
/// clipped to U alone and the step is flagged, so state violations can
/// still occur.
pub struct ProjectionPolicy<P: Policy> {
    pub raw: P,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_set: crate::polytope::HPolytope,
    pub u_set: crate::polytope::HPolytope,
}

impl<P: Policy> ProjectionPolicy<P> {
    pub fn new(raw: P, system: &LtiSystem) -> Self {
        ProjectionPolicy {
            raw,
            a: system.a.clone(),
            b: system.b.clone(),
            x_set: system.x_set.clone(),
            u_set: system.u_set.clone(),
        }
    }

    fn project(&self, x: &DVector<f64>, u_raw: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        let n = u_raw.len();
        let hessian = DMatrix::identity(n, n) * 2.0;
        let linear = u_raw * -2.0;
        let state_rows = self.x_set.normals() * &self.b;
        let state_rhs = self.x_set.offsets() - self.x_set.normals() * (&self.a * x);
        let total = self.u_set.num_rows() + state_rows.nrows();
        let mut g = DMatrix::zeros(total, n);
        g.view_mut((0, 0), (self.u_set.num_rows(), n))
            .copy_from(self.u_set.normals());
        g.view_mut((self.u_set.num_rows(), 0), (state_rows.nrows(), n))
            .copy_from(&state_rows);
        let mut h = DVector::zeros(total);
        h.rows_mut(0, self.u_set.num_rows())
            .copy_from(self.u_set.offsets());
        h.rows_mut(self.u_set.num_rows(), state_rows.nrows())
            .copy_from(&state_rhs);
        let problem = QpProblem::new(hessian.clone(), linear.clone(), g, h)
            .map_err(|e| SimError::DimensionMismatch(e.to_string()))?;
        let sol = qp::solve_qp(&problem, 1e-9);
        if sol.status == SolveStatus::Optimal {
            return Ok((sol.x, StepStatus::Nominal));
        }
        // One-step-feasible set empty: clip to the input set only.
        let clipped = QpProblem::new(
            hessian,
            linear,
            self.u_set.normals().clone(),
            self.u_set.offsets().clone(),
        )
        .map_err(|e| SimError::DimensionMismatch(e.to_string()))?;
        let sol = qp::solve_qp(&clipped, 1e-9);
        if sol.status == SolveStatus::Optimal {
            Ok((sol.x, StepStatus::Clipped))
        } else {
            Err(SimError::ProjectionFailed(sol.status))
        }
    }
}

impl<P: Policy> Policy for ProjectionPolicy<P> {
    fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, StepStatus), SimError> {
        let (u_raw, _) = self.raw.control(x)?;
        self.project(x, &u_raw)
    }

    fn name(&self) -> String {
        format!("projection({})", self.raw.name())
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub policy: String,
    pub steps_taken: usize,
    pub completed: bool,
    pub violation_count: usize,
    pub clipped_count: usize,
    pub fallback_count: usize,
    pub mean_step_time: f64,
    pub terminal_norm: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub summaries: Vec<RunSummary>,
    pub trajectories: Vec<Trajectory>,
}

pub fn summarize(policy_name: &str, traj: &Trajectory) -> RunSummary {
    RunSummary {
        policy: policy_name.to_string(),
        steps_taken: traj.steps_taken(),
        completed: traj.completed,
        violation_count: traj.violations.len(),
        clipped_count: traj
            .statuses
            .iter()
            .filter(|s| **s == StepStatus::Clipped)
            .count(),
        fallback_count: traj
            .statuses
            .iter()
            .filter(|s| **s == StepStatus::Fallback)
            .count(),
        mean_step_time: traj.mean_step_time(),
        terminal_norm: traj.terminal_norm(),
        error: traj.error.clone(),
    }
}

/// Runs every policy from the same initial state for the same budget.
pub fn compare(
    system: &LtiSystem,
    policies: &mut [Box<dyn Policy>],
    x0: &DVector<f64>,
    steps: usize,
) -> ComparisonReport {
    let mut summaries = Vec::new();
    let mut trajectories = Vec::new();
    for policy in policies.iter_mut() {
        let name = policy.name();
        let traj = run_closed_loop(system, policy.as_mut(), x0, steps);
        summaries.push(summarize(&name, &traj));
        trajectories.push(traj);
    }
    ComparisonReport {
        summaries,
        trajectories,
    }
}

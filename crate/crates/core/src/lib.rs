//! Learned explicit MPC for constrained discrete-time LTI systems.
//!
//! The library covers the full pipeline: LQR synthesis via the discrete
//! algebraic Riccati equation, halfspace polytope algebra with maximal
//! constraint admissible sets, a dense QP/LP solver, a condensed MPC
//! oracle, a ReLU network approximator with a dual-mode switch, and an
//! online safety governor that keeps the learned controller inside the
//! state and input constraints.

pub mod governor;
pub mod linalg;
pub mod mpc;
pub mod nn;
pub mod polytope;
pub mod qp;
pub mod sim;
pub mod system;

pub use governor::{GovernorModel, GovernorState, GovernStatus};
pub use linalg::RiccatiSolution;
pub use mpc::{CondensedQp, MpcConfig, Sample};
pub use nn::{DualModeController, MlpParams, TrainConfig};
pub use polytope::HPolytope;
pub use qp::{QpProblem, Solution, SolveStatus};
pub use sim::{Policy, Trajectory};
pub use system::LtiSystem;

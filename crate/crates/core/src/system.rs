//! Constrained discrete-time LTI system description.

use crate::polytope::HPolytope;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// x(t+1) = A x(t) + B u(t) with x in X and u in U.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x_set: HPolytope,
        u_set: HPolytope,
    ) -> Result<Self, SystemError> {
        let m = a.nrows();
        let n = b.ncols();
        if a.ncols() != m {
            return Err(SystemError::DimensionMismatch(format!(
                "A is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != m {
            return Err(SystemError::DimensionMismatch(format!(
                "B has {} rows but A is {m}x{m}",
                b.nrows()
            )));
        }
        if x_set.dim() != m {
            return Err(SystemError::DimensionMismatch(format!(
                "X has dim {} but the state has dim {m}",
                x_set.dim()
            )));
        }
        if u_set.dim() != n {
            return Err(SystemError::DimensionMismatch(format!(
                "U has dim {} but the input has dim {n}",
                u_set.dim()
            )));
        }
        Ok(Self { a, b, x_set, u_set })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

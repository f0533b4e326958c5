//! Declarative pipeline configuration: one TOML file describes the system,
//! constraints, MPC design, network, governor, and simulation settings.

use empc_core::polytope::HPolytope;
use empc_core::system::LtiSystem;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: SystemBlock,
    pub constraints: ConstraintBlock,
    pub mpc: MpcBlock,
    #[serde(default)]
    pub nn: NnBlock,
    #[serde(default)]
    pub governor: GovernorBlock,
    #[serde(default)]
    pub sample: SampleBlock,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub numerics: NumericsBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Constraint sets given either as symmetric boxes (`*_half_widths`) or as a
/// general half-space description (`*_normals` with `*_offsets`).
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub x_half_widths: Option<Vec<f64>>,
    pub x_normals: Option<Vec<Vec<f64>>>,
    pub x_offsets: Option<Vec<f64>>,
    pub u_half_widths: Option<Vec<f64>>,
    pub u_normals: Option<Vec<Vec<f64>>>,
    pub u_offsets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MpcBlock {
    /// State cost; identity when absent.
    pub q: Option<Vec<Vec<f64>>>,
    /// Input cost; identity when absent.
    pub r: Option<Vec<Vec<f64>>>,
    /// Terminal cost; computed from the Riccati equation when absent.
    pub p: Option<Vec<Vec<f64>>>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnBlock {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: Option<usize>,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for NnBlock {
    fn default() -> Self {
        NnBlock {
            hidden: vec![20, 20, 20],
            learning_rate: 1e-3,
            epochs: 1000,
            batch: None,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GovernorBlock {
    pub weight: f64,
    pub epsilon: f64,
}

impl Default for GovernorBlock {
    fn default() -> Self {
        GovernorBlock {
            weight: 1.0,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleBlock {
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleBlock {
    fn default() -> Self {
        SampleBlock { count: 100, seed: 0 }
    }
}

/// Initial states: either the literal string "vertices" (2-D systems only,
/// vertices of the governed feasible region) or an explicit list of states.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum InitialStates {
    Keyword(String),
    List(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateBlock {
    pub steps: usize,
    pub initial_states: InitialStates,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        SimulateBlock {
            steps: 50,
            initial_states: InitialStates::Keyword("vertices".into()),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsBlock {
    /// Tolerance used for set containment and equality diagnostics.
    pub set_tol: f64,
    /// Containment tolerance used when flagging trajectory violations.
    pub violation_tol: f64,
}

impl Default for NumericsBlock {
    fn default() -> Self {
        NumericsBlock {
            set_tol: 1e-8,
            violation_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "out".into() }
    }
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(CliError::Validation(format!("{name}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Validation(format!("{name}: ragged rows")));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Validation(format!("{name}: non-finite entry")));
    }
    Ok(DMatrix::from_row_slice(rows.len(), cols, &data))
}

fn polytope_from_block(
    name: &str,
    dim: usize,
    half_widths: &Option<Vec<f64>>,
    normals: &Option<Vec<Vec<f64>>>,
    offsets: &Option<Vec<f64>>,
) -> Result<HPolytope, CliError> {
    match (half_widths, normals, offsets) {
        (Some(w), None, None) => {
            if w.len() != dim {
                return Err(CliError::Validation(format!(
                    "{name}: expected {dim} half-widths, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(CliError::Validation(format!(
                    "{name}: half-widths must be positive"
                )));
            }
            Ok(HPolytope::box_from_half_widths(w))
        }
        (None, Some(n), Some(o)) => {
            let mat = matrix_from_rows(name, n)?;
            if mat.ncols() != dim {
                return Err(CliError::Validation(format!(
                    "{name}: normals have {} columns, expected {dim}",
                    mat.ncols()
                )));
            }
            if o.len() != mat.nrows() {
                return Err(CliError::Validation(format!(
                    "{name}: {} offsets for {} rows",
                    o.len(),
                    mat.nrows()
                )));
            }
            HPolytope::new(mat, DVector::from_vec(o.clone()))
                .map_err(|e| CliError::Validation(format!("{name}: {e}")))
        }
        _ => Err(CliError::Validation(format!(
            "{name}: give either *_half_widths or *_normals with *_offsets"
        ))),
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-checks every dimension before any numerical work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let a = matrix_from_rows("system.a", &self.system.a)?;
        let b = matrix_from_rows("system.b", &self.system.b)?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err(CliError::Validation("system.a must be square".into()));
        }
        if b.nrows() != n {
            return Err(CliError::Validation(
                "system.b row count must match system.a".into(),
            ));
        }
        let m = b.ncols();
        self.state_set()?;
        self.input_set()?;
        for (name, rows, dim) in [
            ("mpc.q", &self.mpc.q, n),
            ("mpc.r", &self.mpc.r, m),
            ("mpc.p", &self.mpc.p, n),
        ] {
            if let Some(rows) = rows {
                let mat = matrix_from_rows(name, rows)?;
                if mat.nrows() != dim || mat.ncols() != dim {
                    return Err(CliError::Validation(format!("{name}: must be {dim}x{dim}")));
                }
            }
        }
        if self.mpc.horizon == 0 {
            return Err(CliError::Validation("mpc.horizon must be positive".into()));
        }
        if self.nn.hidden.is_empty() || self.nn.hidden.contains(&0) {
            return Err(CliError::Validation(
                "nn.hidden must list positive layer widths".into(),
            ));
        }
        if !(self.nn.learning_rate > 0.0) || !(0.0..1.0).contains(&self.nn.validation_fraction) {
            return Err(CliError::Validation("nn hyperparameters out of range".into()));
        }
        if !(self.governor.weight > 0.0) || !(0.0 < self.governor.epsilon && self.governor.epsilon < 1.0)
        {
            return Err(CliError::Validation("governor block out of range".into()));
        }
        if let InitialStates::List(states) = &self.simulate.initial_states {
            for (i, x) in states.iter().enumerate() {
                if x.len() != n {
                    return Err(CliError::Validation(format!(
                        "simulate.initial_states[{i}]: expected dimension {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> Result<DMatrix<f64>, CliError> {
        matrix_from_rows("system.a", &self.system.a)
    }

    pub fn b_matrix(&self) -> Result<DMatrix<f64>, CliError> {
        matrix_from_rows("system.b", &self.system.b)
    }

    pub fn state_set(&self) -> Result<HPolytope, CliError> {
        let n = self.system.a.len();
        polytope_from_block(
            "constraints X",
            n,
            &self.constraints.x_half_widths,
            &self.constraints.x_normals,
            &self.constraints.x_offsets,
        )
    }

    pub fn input_set(&self) -> Result<HPolytope, CliError> {
        let m = self.system.b.first().map_or(0, |r| r.len());
        polytope_from_block(
            "constraints U",
            m,
            &self.constraints.u_half_widths,
            &self.constraints.u_normals,
            &self.constraints.u_offsets,
        )
    }

    pub fn build_system(&self) -> Result<LtiSystem, CliError> {
        LtiSystem::new(
            self.a_matrix()?,
            self.b_matrix()?,
            self.state_set()?,
            self.input_set()?,
        )
        .map_err(|e| CliError::Validation(format!("system: {e}")))
    }

    pub fn q_matrix(&self) -> Result<DMatrix<f64>, CliError> {
        let n = self.system.a.len();
        match &self.mpc.q {
            Some(rows) => matrix_from_rows("mpc.q", rows),
            None => Ok(DMatrix::identity(n, n)),
        }
    }

    pub fn r_matrix(&self) -> Result<DMatrix<f64>, CliError> {
        let m = self.system.b.first().map_or(0, |r| r.len());
        match &self.mpc.r {
            Some(rows) => matrix_from_rows("mpc.r", rows),
            None => Ok(DMatrix::identity(m, m)),
        }
    }

    pub fn p_matrix(&self) -> Result<Option<DMatrix<f64>>, CliError> {
        match &self.mpc.p {
            Some(rows) => Ok(Some(matrix_from_rows("mpc.p", rows)?)),
            None => Ok(None),
        }
    }

    /// Full layer list for the approximator: state -> hidden -> input.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let n = self.system.a.len();
        let m = self.system.b.first().map_or(0, |r| r.len());
        let mut sizes = vec![n];
        sizes.extend_from_slice(&self.nn.hidden);
        sizes.push(m);
        sizes
    }
}

//! Pipeline CLI for learned explicit MPC with a safety governor.
//!
//! Stages: synthesize (gains and invariant sets), sample (query the implicit
//! law), train (fit the approximator), simulate (closed loop), region
//! (feasible-region comparison), compare (timing/safety table). Every stage
//! reads one TOML config; artifacts carry a fingerprint of the producing
//! config sections so stale combinations are rejected.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod svg;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, arguments, or missing/mismatched artifacts.
    Validation(String),
    /// A numerical stage failed (synthesis, solver, training divergence).
    Numerical(String),
    /// A governed run violated constraints.
    Safety(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Safety(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical error: {msg}"),
            CliError::Safety(msg) => write!(f, "safety violation: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

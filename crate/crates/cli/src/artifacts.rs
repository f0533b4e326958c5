//! Artifact files written by the pipeline stages. Every artifact starts with
//! a fingerprint of the config sections that produced it, so a stale or
//! mismatched artifact is rejected instead of silently reused.

use std::path::{Path, PathBuf};

use empc_core::governor::GovernorModel;
use empc_core::mpc::{dataset_from_csv, dataset_to_csv, Sample};
use empc_core::nn::MlpParams;
use empc_core::polytope::HPolytope;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::CliError;

pub const GOVERNOR_FILE: &str = "governor.txt";
pub const DATASET_FILE: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const LOSS_FILE: &str = "loss.csv";

fn section_text<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config section serializes")
}

/// Stable hex fingerprint of the config sections a pipeline stage depends on.
fn fingerprint(parts: &[String]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Sections feeding synthesis: system, constraints, mpc, governor.
pub fn synth_fingerprint(config: &PipelineConfig) -> String {
    fingerprint(&[
        section_text(&config.system),
        section_text(&config.constraints),
        section_text(&config.mpc),
        section_text(&config.governor),
    ])
}

/// Sampling additionally depends on the sample block.
pub fn sample_fingerprint(config: &PipelineConfig) -> String {
    fingerprint(&[synth_fingerprint(config), section_text(&config.sample)])
}

/// Training additionally depends on the nn block.
pub fn train_fingerprint(config: &PipelineConfig) -> String {
    fingerprint(&[sample_fingerprint(config), section_text(&config.nn)])
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!(
            "missing artifact {} ({e}); run the producing stage first",
            path.display()
        ))
    })
}

/// Splits the fingerprint header off an artifact and checks it.
fn check_header<'a>(path: &Path, text: &'a str, expected: &str) -> Result<&'a str, CliError> {
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| CliError::Validation(format!("{}: empty artifact", path.display())))?;
    let found = first
        .strip_prefix("# fingerprint ")
        .ok_or_else(|| CliError::Validation(format!("{}: missing fingerprint", path.display())))?
        .trim();
    if found != expected {
        return Err(CliError::Validation(format!(
            "{}: produced by a different configuration (fingerprint {found}, expected {expected}); re-run the earlier stages",
            path.display()
        )));
    }
    Ok(rest)
}

fn push_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    out.push_str(&format!("matrix {name} {} {}\n", m.nrows(), m.ncols()));
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn push_polytope(out: &mut String, name: &str, p: &HPolytope) {
    out.push_str(&format!("polytope {name} {} {}\n", p.num_rows(), p.dim()));
    for i in 0..p.num_rows() {
        let mut row: Vec<String> = (0..p.dim())
            .map(|j| format!("{:.17e}", p.normals()[(i, j)]))
            .collect();
        row.push(format!("{:.17e}", p.offsets()[i]));
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::str::Lines<'a>,
}

impl<'a> Reader<'a> {
    fn bad(&self, what: &str) -> CliError {
        CliError::Validation(format!("{}: corrupt artifact ({what})", self.path.display()))
    }

    fn next_line(&mut self) -> Result<&'a str, CliError> {
        self.lines.next().ok_or_else(|| self.bad("truncated"))
    }

    fn numbers(&mut self, count: usize) -> Result<Vec<f64>, CliError> {
        let line = self.next_line()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| self.bad("bad number"))?;
        if vals.len() != count {
            return Err(self.bad("wrong row length"));
        }
        Ok(vals)
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>, CliError> {
        let header = self.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "matrix" || parts[1] != name {
            return Err(self.bad(&format!("expected matrix {name}")));
        }
        let rows: usize = parts[2].parse().map_err(|_| self.bad("bad dims"))?;
        let cols: usize = parts[3].parse().map_err(|_| self.bad("bad dims"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.numbers(cols)?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn polytope(&mut self, name: &str) -> Result<HPolytope, CliError> {
        let header = self.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "polytope" || parts[1] != name {
            return Err(self.bad(&format!("expected polytope {name}")));
        }
        let rows: usize = parts[2].parse().map_err(|_| self.bad("bad dims"))?;
        let dim: usize = parts[3].parse().map_err(|_| self.bad("bad dims"))?;
        let mut normals = Vec::with_capacity(rows * dim);
        let mut offsets = Vec::with_capacity(rows);
        for _ in 0..rows {
            let vals = self.numbers(dim + 1)?;
            normals.extend_from_slice(&vals[..dim]);
            offsets.push(vals[dim]);
        }
        HPolytope::new(
            DMatrix::from_row_slice(rows, dim, &normals),
            DVector::from_vec(offsets),
        )
        .map_err(|e| self.bad(&e.to_string()))
    }

    fn scalar(&mut self, name: &str) -> Result<f64, CliError> {
        let line = self.next_line()?;
        let (key, val) = line.split_once(' ').ok_or_else(|| self.bad("bad scalar"))?;
        if key != name {
            return Err(self.bad(&format!("expected scalar {name}")));
        }
        val.trim().parse().map_err(|_| self.bad("bad scalar value"))
    }
}

pub fn governor_path(out_dir: &Path) -> PathBuf {
    out_dir.join(GOVERNOR_FILE)
}

/// Persists the full governor model plus the terminal cost.
pub fn save_governor(
    out_dir: &Path,
    config: &PipelineConfig,
    model: &GovernorModel,
    p: &DMatrix<f64>,
) -> Result<(), CliError> {
    let mut body = format!("# fingerprint {}\n", synth_fingerprint(config));
    push_matrix(&mut body, "P", p);
    push_matrix(&mut body, "K", &model.gain);
    push_matrix(&mut body, "MX", &model.mx);
    push_matrix(&mut body, "MU", &model.mu);
    push_matrix(&mut body, "MGAMMA", &model.m_gamma);
    push_polytope(&mut body, "SIGMA_INF", &model.sigma_inf);
    push_polytope(&mut body, "GAMMA_SET", &model.gamma_set);
    push_polytope(&mut body, "AUG_SET", &model.aug_set);
    body.push_str(&format!("weight {:.17e}\n", model.weight));
    body.push_str(&format!("sigma_determination {}\n", model.sigma_determination));
    body.push_str(&format!("aug_determination {}\n", model.aug_determination));
    write_file(&governor_path(out_dir), &body)
}

pub fn load_governor(
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<(GovernorModel, DMatrix<f64>), CliError> {
    let path = governor_path(out_dir);
    let text = read_file(&path)?;
    let body = check_header(&path, &text, &synth_fingerprint(config))?;
    let mut reader = Reader {
        path: &path,
        lines: body.lines(),
    };
    let p = reader.matrix("P")?;
    let gain = reader.matrix("K")?;
    let mx = reader.matrix("MX")?;
    let mu = reader.matrix("MU")?;
    let m_gamma = reader.matrix("MGAMMA")?;
    let sigma_inf = reader.polytope("SIGMA_INF")?;
    let gamma_set = reader.polytope("GAMMA_SET")?;
    let aug_set = reader.polytope("AUG_SET")?;
    let weight = reader.scalar("weight")?;
    let sigma_determination = reader.scalar("sigma_determination")? as usize;
    let aug_determination = reader.scalar("aug_determination")? as usize;
    let gamma_dim = gamma_set.dim();
    Ok((
        GovernorModel {
            gain,
            mx,
            mu,
            m_gamma,
            gamma_set,
            aug_set,
            sigma_inf,
            weight,
            gamma_dim,
            sigma_determination,
            aug_determination,
        },
        p,
    ))
}

pub fn save_dataset(
    out_dir: &Path,
    config: &PipelineConfig,
    seed: u64,
    samples: &[Sample],
) -> Result<(), CliError> {
    let body = format!(
        "# fingerprint {}\n# seed {seed}\n{}",
        sample_fingerprint(config),
        dataset_to_csv(samples)
    );
    write_file(&out_dir.join(DATASET_FILE), &body)
}

pub fn load_dataset(out_dir: &Path, config: &PipelineConfig) -> Result<Vec<Sample>, CliError> {
    let path = out_dir.join(DATASET_FILE);
    let text = read_file(&path)?;
    let body = check_header(&path, &text, &sample_fingerprint(config))?;
    let csv: String = body
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let n = config.system.a.len();
    let m = config.system.b.first().map_or(0, |r| r.len());
    dataset_from_csv(&csv, n, m)
        .ok_or_else(|| CliError::Validation(format!("{}: corrupt dataset", path.display())))
}

pub fn save_model(
    out_dir: &Path,
    config: &PipelineConfig,
    params: &MlpParams,
) -> Result<(), CliError> {
    let body = format!(
        "# fingerprint {}\n{}",
        train_fingerprint(config),
        params.to_text()
    );
    write_file(&out_dir.join(MODEL_FILE), &body)
}

pub fn load_model(out_dir: &Path, config: &PipelineConfig) -> Result<MlpParams, CliError> {
    let path = out_dir.join(MODEL_FILE);
    let text = read_file(&path)?;
    let body = check_header(&path, &text, &train_fingerprint(config))?;
    MlpParams::from_text(body)
        .map_err(|e| CliError::Validation(format!("{}: corrupt model ({e})", path.display())))
}

pub fn save_loss_history(out_dir: &Path, history: &[f64]) -> Result<(), CliError> {
    let mut body = String::from("epoch,loss\n");
    for (i, loss) in history.iter().enumerate() {
        body.push_str(&format!("{i},{loss:.17e}\n"));
    }
    write_file(&out_dir.join(LOSS_FILE), &body)
}

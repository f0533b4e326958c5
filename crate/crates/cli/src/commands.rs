//! The six pipeline stages behind the CLI subcommands.

use std::path::Path;
use std::time::Instant;

use empc_core::governor::GovernorModel;
use empc_core::linalg::{lqr_gain, solve_dare};
use empc_core::mpc::{condense, sample_training_set, CondensedQp, MpcConfig, MpcError};
use empc_core::nn::{train, DualModeController, TrainConfig};
use empc_core::polytope::{n_step_controllable_set, HPolytope};
use empc_core::sim::{
    self, DualModePolicy, GovernedPolicy, LinearPolicy, MpcPolicy, Policy, ProjectionPolicy,
    StepStatus,
};
use empc_core::system::LtiSystem;
use nalgebra::{DMatrix, DVector};

use crate::artifacts;
use crate::config::{InitialStates, PipelineConfig};
use crate::svg::{Canvas, PALETTE};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Governed,
    DualMode,
    Mpc,
    Lqr,
    Projection,
}

impl PolicyKind {
    fn label(self) -> &'static str {
        match self {
            PolicyKind::Governed => "governed",
            PolicyKind::DualMode => "dual_mode",
            PolicyKind::Mpc => "mpc",
            PolicyKind::Lqr => "lqr",
            PolicyKind::Projection => "projection",
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out.display())))
}

fn numerical<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Numerical(format!("{context}: {e}"))
}

/// Synthesis: terminal cost and gain, admissible sets, governor model.
pub fn cmd_synthesize(config: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let system = config.build_system()?;
    let q = config.q_matrix()?;
    let r = config.r_matrix()?;
    let (p, k) = match config.p_matrix()? {
        Some(p) => {
            let k = lqr_gain(&system.a, &system.b, &r, &p)
                .map_err(numerical("gain from supplied terminal cost"))?;
            println!("terminal cost supplied; Riccati solve skipped");
            (p, k)
        }
        None => {
            let sol = solve_dare(&system.a, &system.b, &q, &r, 1e-12, 10_000)
                .map_err(numerical("Riccati solve"))?;
            (sol.p, sol.k)
        }
    };
    print!("K =");
    for j in 0..k.ncols() {
        print!(" {:+.4}", k[(0, j)]);
    }
    println!();
    let model = empc_core::governor::build_governor(
        &system,
        &k,
        config.governor.weight,
        config.governor.epsilon,
    )
    .map_err(numerical("governor synthesis"))?;
    println!(
        "admissible set: {} rows, determined at recursion depth {}",
        model.sigma_inf.num_rows(),
        model.sigma_determination
    );
    println!(
        "augmented set:  {} rows, determined at recursion depth {}",
        model.aug_set.num_rows(),
        model.aug_determination
    );
    println!(
        "command set:    {} rows in dimension {}",
        model.gamma_set.num_rows(),
        model.gamma_dim
    );
    println!("zero-command slice validated against the admissible set");
    artifacts::save_governor(out, config, &model, &p)?;
    println!("wrote {}", artifacts::governor_path(out).display());
    Ok(())
}

fn condensed_qp(
    config: &PipelineConfig,
    system: &LtiSystem,
    model: &GovernorModel,
    p: &DMatrix<f64>,
) -> Result<CondensedQp, CliError> {
    let mpc_config = MpcConfig {
        q: config.q_matrix()?,
        r: config.r_matrix()?,
        p: p.clone(),
        horizon: config.mpc.horizon,
        terminal_set: model.sigma_inf.clone(),
    };
    condense(system, &mpc_config).map_err(numerical("MPC condensation"))
}

/// Sampling: draw feasible (x, kappa_mpc(x), value) triples.
pub fn cmd_sample(
    config: &PipelineConfig,
    out: &Path,
    count: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let count = count.unwrap_or(config.sample.count);
    let seed = seed.unwrap_or(config.sample.seed);
    if count == 0 {
        return Err(CliError::Validation("sample count must be positive".into()));
    }
    ensure_out_dir(out)?;
    let system = config.build_system()?;
    let (model, p) = artifacts::load_governor(out, config)?;
    let cond = condensed_qp(config, &system, &model, &p)?;
    let samples = sample_training_set(&system, &cond, count, seed).map_err(|e| match e {
        MpcError::AcceptanceFloor => CliError::Numerical(
            "sampling acceptance rate too low; the feasible region may be tiny".into(),
        ),
        other => CliError::Numerical(format!("sampling: {other}")),
    })?;
    artifacts::save_dataset(out, config, seed, &samples)?;
    println!(
        "wrote {} samples to {}",
        samples.len(),
        out.join(artifacts::DATASET_FILE).display()
    );
    Ok(())
}

/// Training: fit the approximator to the sampled law.
pub fn cmd_train(config: &PipelineConfig, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let dataset = artifacts::load_dataset(out, config)?;
    let train_config = TrainConfig {
        learning_rate: config.nn.learning_rate,
        epochs: config.nn.epochs,
        batch: config.nn.batch,
        seed: seed.unwrap_or(config.nn.seed),
        validation_fraction: config.nn.validation_fraction,
    };
    let result = train(&dataset, &config.layer_sizes(), &train_config)
        .map_err(numerical("training"))?;
    let first = result.loss_history.first().copied().unwrap_or(0.0);
    let last = result.loss_history.last().copied().unwrap_or(0.0);
    if !last.is_finite() {
        return Err(CliError::Numerical(format!(
            "training diverged (final loss {last})"
        )));
    }
    artifacts::save_model(out, config, &result.params)?;
    artifacts::save_loss_history(out, &result.loss_history)?;
    if first > 0.0 {
        println!(
            "loss {first:.4e} -> {last:.4e} (ratio {:.3})",
            last / first
        );
    }
    if let Some(val) = result.validation_mse {
        println!("validation mse {val:.4e}");
    }
    println!("wrote {}", out.join(artifacts::MODEL_FILE).display());
    Ok(())
}

/// Initial states: explicit list, or the governed region's vertices (2-D).
/// Vertices are pulled a hair toward the interior because they are only
/// defined up to the tolerance of the projected half-space description.
fn initial_states(
    config: &PipelineConfig,
    model: &GovernorModel,
    region: Option<&HPolytope>,
) -> Result<Vec<DVector<f64>>, CliError> {
    match &config.simulate.initial_states {
        InitialStates::List(list) => Ok(list
            .iter()
            .map(|x| DVector::from_vec(x.clone()))
            .collect()),
        InitialStates::Keyword(word) if word == "vertices" => {
            let n = model.gain.ncols();
            if n != 2 {
                return Err(CliError::Validation(
                    "initial_states = \"vertices\" needs a 2-D state space; list states explicitly"
                        .into(),
                ));
            }
            let region = match region {
                Some(r) => r.clone(),
                None => governed_region(model)?,
            };
            let (center, _) = region
                .chebyshev_center()
                .map_err(numerical("region center"))?;
            Ok(region
                .vertices_2d()
                .map_err(numerical("region vertices"))?
                .iter()
                .map(|v| v + (&center - v) * 1e-6)
                .collect())
        }
        InitialStates::Keyword(other) => Err(CliError::Validation(format!(
            "unknown initial_states keyword {other:?}"
        ))),
    }
}

/// Feasible region of the governed scheme: the augmented set with the
/// command coordinates projected out.
fn governed_region(model: &GovernorModel) -> Result<HPolytope, CliError> {
    let n = model.gain.ncols();
    let drop: Vec<usize> = (n..n + model.gamma_dim).collect();
    model.aug_set.project_eliminate(&drop).map_err(|e| {
        CliError::Numerical(format!(
            "region projection failed ({e}); Fourier-Motzkin elimination can blow up in high \
             dimension — consider working with the augmented set directly"
        ))
    })
}

enum RunPolicy {
    Governed(GovernedPolicy<DualModePolicy>),
    DualMode(DualModePolicy),
    Mpc(MpcPolicy),
    Lqr(LinearPolicy),
    Projection(ProjectionPolicy<DualModePolicy>),
}

impl RunPolicy {
    fn control(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, StepStatus), empc_core::sim::SimError> {
        match self {
            RunPolicy::Governed(p) => p.control(x),
            RunPolicy::DualMode(p) => p.control(x),
            RunPolicy::Mpc(p) => p.control(x),
            RunPolicy::Lqr(p) => p.control(x),
            RunPolicy::Projection(p) => p.control(x),
        }
    }

    fn gamma(&self) -> Option<DVector<f64>> {
        match self {
            RunPolicy::Governed(p) => p.state.gamma_prev.clone(),
            _ => None,
        }
    }
}

fn build_policy(
    kind: PolicyKind,
    config: &PipelineConfig,
    out: &Path,
    system: &LtiSystem,
    model: &GovernorModel,
    p: &DMatrix<f64>,
) -> Result<RunPolicy, CliError> {
    let dual = |boundary_tol: f64| -> Result<DualModePolicy, CliError> {
        let mlp = artifacts::load_model(out, config)?;
        Ok(DualModePolicy {
            controller: DualModeController {
                gain: model.gain.clone(),
                sigma_inf: model.sigma_inf.clone(),
                mlp,
                boundary_tol,
            },
        })
    };
    Ok(match kind {
        PolicyKind::Governed => RunPolicy::Governed(GovernedPolicy::new(dual(0.0)?, model.clone())),
        PolicyKind::DualMode => RunPolicy::DualMode(dual(0.0)?),
        PolicyKind::Mpc => RunPolicy::Mpc(MpcPolicy {
            cond: condensed_qp(config, system, model, p)?,
        }),
        PolicyKind::Lqr => RunPolicy::Lqr(LinearPolicy {
            gain: model.gain.clone(),
        }),
        PolicyKind::Projection => RunPolicy::Projection(ProjectionPolicy {
            raw: dual(0.0)?,
            a: system.a.clone(),
            b: system.b.clone(),
            x_set: system.x_set.clone(),
            u_set: system.u_set.clone(),
        }),
    })
}

struct RunRecord {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    gammas: Vec<Option<DVector<f64>>>,
    step_times: Vec<f64>,
    violations: Vec<usize>,
    error: Option<String>,
}

fn run_and_record(
    system: &LtiSystem,
    policy: &mut RunPolicy,
    x0: &DVector<f64>,
    steps: usize,
    violation_tol: f64,
) -> Result<RunRecord, CliError> {
    let mut record = RunRecord {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        gammas: Vec::new(),
        step_times: Vec::new(),
        violations: Vec::new(),
        error: None,
    };
    let mut x = x0.clone();
    for t in 0..steps {
        let start = Instant::now();
        let (u, _status) = match policy.control(&x) {
            Ok(pair) => pair,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        record.step_times.push(start.elapsed().as_secs_f64());
        let next = system.step(&x, &u);
        let u_ok = system
            .u_set
            .contains(&u, violation_tol)
            .map_err(numerical("violation check"))?;
        let x_ok = system
            .x_set
            .contains(&next, violation_tol)
            .map_err(numerical("violation check"))?;
        if !u_ok || !x_ok {
            record.violations.push(t);
        }
        record.inputs.push(u);
        record.gammas.push(policy.gamma());
        record.states.push(next.clone());
        x = next;
    }
    Ok(record)
}

fn trajectory_csv(record: &RunRecord, gamma_dim: usize) -> String {
    let n = record.states[0].len();
    let m = record.inputs.first().map_or(0, |u| u.len());
    let with_gamma = record.gammas.iter().any(|g| g.is_some());
    let mut out = String::from("t");
    for i in 0..n {
        out.push_str(&format!(",x{}", i + 1));
    }
    for i in 0..m {
        out.push_str(&format!(",u{}", i + 1));
    }
    if with_gamma {
        for i in 0..gamma_dim {
            out.push_str(&format!(",gamma{}", i + 1));
        }
    }
    out.push_str(",violation,step_time\n");
    for t in 0..record.inputs.len() {
        out.push_str(&format!("{t}"));
        for v in record.states[t].iter() {
            out.push_str(&format!(",{v:.17e}"));
        }
        for v in record.inputs[t].iter() {
            out.push_str(&format!(",{v:.17e}"));
        }
        if with_gamma {
            match &record.gammas[t] {
                Some(g) => {
                    for v in g.iter() {
                        out.push_str(&format!(",{v:.17e}"));
                    }
                }
                None => {
                    for _ in 0..gamma_dim {
                        out.push_str(",nan");
                    }
                }
            }
        }
        let flag = record.violations.contains(&t) as u8;
        out.push_str(&format!(",{flag},{:.3e}\n", record.step_times[t]));
    }
    out
}

/// Closed-loop simulation for one policy from the configured initial states.
pub fn cmd_simulate(
    config: &PipelineConfig,
    out: &Path,
    kind: PolicyKind,
) -> Result<(), CliError> {
    if config.simulate.steps == 0 {
        return Err(CliError::Validation("simulate.steps must be positive".into()));
    }
    ensure_out_dir(out)?;
    let system = config.build_system()?;
    let (model, p) = artifacts::load_governor(out, config)?;
    let n = system.state_dim();
    let region = if n == 2 { Some(governed_region(&model)?) } else { None };
    let starts = initial_states(config, &model, region.as_ref())?;
    if starts.is_empty() {
        return Err(CliError::Validation("no initial states".into()));
    }
    let tol = config.numerics.violation_tol;
    let mut total_violations = 0;
    let mut records = Vec::new();
    for (i, x0) in starts.iter().enumerate() {
        let mut policy = build_policy(kind, config, out, &system, &model, &p)?;
        let record = run_and_record(&system, &mut policy, x0, config.simulate.steps, tol)?;
        let path = out.join(format!("traj_{}_{i}.csv", kind.label()));
        std::fs::write(&path, trajectory_csv(&record, model.gamma_dim))
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
        let terminal = record.states.last().map_or(0.0, |x| x.norm());
        println!(
            "run {i}: {} steps, {} violations, terminal norm {terminal:.3e}{}",
            record.inputs.len(),
            record.violations.len(),
            record
                .error
                .as_deref()
                .map(|e| format!(", stopped early: {e}"))
                .unwrap_or_default()
        );
        total_violations += record.violations.len();
        records.push(record);
    }
    if let Some(region) = &region {
        let (lo, hi) = system
            .x_set
            .bounding_box()
            .map_err(numerical("bounding box"))?;
        let mut canvas = Canvas::new([lo[0], lo[1]], [hi[0], hi[1]]);
        let mut legend = Vec::new();
        for (poly, name, color) in [
            (&system.x_set, "state constraints", PALETTE[7]),
            (region, "governed region", PALETTE[0]),
            (&model.sigma_inf, "admissible set", PALETTE[2]),
        ] {
            canvas.polygon(
                &poly.vertices_2d().map_err(numerical("vertices"))?,
                color,
                name,
            );
            legend.push((name.to_string(), color.to_string()));
        }
        for (i, record) in records.iter().enumerate() {
            let color = PALETTE[(3 + i % 3) % PALETTE.len()];
            canvas.polyline(&record.states, color, &format!("run {i}"));
            canvas.marker(&record.states[0], color);
        }
        legend.push(("trajectories".to_string(), PALETTE[3].to_string()));
        canvas.legend(&legend);
        let path = out.join(format!("simulate_{}.svg", kind.label()));
        std::fs::write(&path, canvas.finish())
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    if kind == PolicyKind::Governed && total_violations > 0 {
        return Err(CliError::Safety(format!(
            "governed run produced {total_violations} constraint violations"
        )));
    }
    Ok(())
}

/// Feasible-region comparison: admissible set, governed region, and the
/// N-step MPC regions.
pub fn cmd_region(config: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let system = config.build_system()?;
    let (model, _p) = artifacts::load_governor(out, config)?;
    let region = governed_region(&model)?;
    let tol = config.numerics.set_tol;
    let mut mpc_regions = Vec::new();
    for horizon in [1usize, 3, 10] {
        let set = n_step_controllable_set(
            &system.a,
            &system.b,
            &system.x_set,
            &system.u_set,
            &model.sigma_inf,
            horizon,
        )
        .map_err(numerical("controllable set"))?
        .remove_redundant()
        .map_err(numerical("redundancy removal"))?;
        mpc_regions.push((horizon, set));
    }
    for pair in mpc_regions.windows(2) {
        let (na, a) = &pair[0];
        let (nb, b) = &pair[1];
        if !a.contained_in(b, tol).map_err(numerical("containment"))? {
            return Err(CliError::Numerical(format!(
                "expected nesting violated: the {na}-step region is not inside the {nb}-step one"
            )));
        }
    }
    let named: Vec<(String, &HPolytope)> = std::iter::once(("sigma_inf".to_string(), &model.sigma_inf))
        .chain(std::iter::once(("governed".to_string(), &region)))
        .chain(mpc_regions.iter().map(|(h, s)| (format!("mpc_n{h}"), s)))
        .collect();
    if system.state_dim() == 2 {
        let mut csv = String::from("set,vertex,x1,x2\n");
        let (lo, hi) = system
            .x_set
            .bounding_box()
            .map_err(numerical("bounding box"))?;
        let mut canvas = Canvas::new([lo[0], lo[1]], [hi[0], hi[1]]);
        let mut legend = Vec::new();
        println!("{:<12} {:>8} {:>10}", "set", "rows", "area");
        for (i, (name, poly)) in named.iter().enumerate() {
            let verts = poly.vertices_2d().map_err(numerical("vertices"))?;
            for (j, v) in verts.iter().enumerate() {
                csv.push_str(&format!("{name},{j},{:.17e},{:.17e}\n", v[0], v[1]));
            }
            let area = poly.area_2d().map_err(numerical("area"))?;
            println!("{:<12} {:>8} {:>10.3}", name, poly.num_rows(), area);
            let color = PALETTE[i % PALETTE.len()];
            canvas.polygon(&verts, color, name);
            legend.push((name.clone(), color.to_string()));
        }
        canvas.legend(&legend);
        for (path, body) in [
            (out.join("regions.csv"), csv),
            (out.join("regions.svg"), canvas.finish()),
        ] {
            std::fs::write(&path, body).map_err(|e| {
                CliError::Validation(format!("cannot write {}: {e}", path.display()))
            })?;
            println!("wrote {}", path.display());
        }
    } else {
        // Higher dimensions: membership grid over the first two coordinates
        // with the remaining ones fixed at zero.
        let (lo, hi) = system
            .x_set
            .bounding_box()
            .map_err(numerical("bounding box"))?;
        let res = 41usize;
        let mut csv = String::from("x1,x2,in_sigma_inf,in_governed\n");
        for i in 0..res {
            for j in 0..res {
                let mut x = DVector::zeros(system.state_dim());
                x[0] = lo[0] + (hi[0] - lo[0]) * i as f64 / (res - 1) as f64;
                x[1] = lo[1] + (hi[1] - lo[1]) * j as f64 / (res - 1) as f64;
                let in_sigma = model
                    .sigma_inf
                    .contains(&x, 0.0)
                    .map_err(numerical("membership"))? as u8;
                let in_region = region.contains(&x, 0.0).map_err(numerical("membership"))? as u8;
                csv.push_str(&format!("{:.6},{:.6},{in_sigma},{in_region}\n", x[0], x[1]));
            }
        }
        let path = out.join("regions.csv");
        std::fs::write(&path, csv)
            .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
        println!(
            "state space is {}-dimensional; wrote membership grid {}",
            system.state_dim(),
            path.display()
        );
    }
    Ok(())
}

/// Timing and safety comparison across the baseline policies.
pub fn cmd_compare(config: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    if config.simulate.steps == 0 {
        return Err(CliError::Validation("simulate.steps must be positive".into()));
    }
    ensure_out_dir(out)?;
    let system = config.build_system()?;
    let (model, p) = artifacts::load_governor(out, config)?;
    let region = if system.state_dim() == 2 {
        Some(governed_region(&model)?)
    } else {
        None
    };
    let starts = initial_states(config, &model, region.as_ref())?;
    let mut kinds = vec![PolicyKind::Mpc, PolicyKind::Governed, PolicyKind::DualMode];
    if system.state_dim() == 2 {
        kinds.push(PolicyKind::Projection);
    }
    let horizons = [1usize, 3, 10];
    let mut csv = String::from(
        "x0,policy,steps,violations,mean_step_time,total_time,terminal_norm,error\n",
    );
    println!(
        "{:<4} {:<14} {:>6} {:>6} {:>12} {:>12}",
        "x0", "policy", "steps", "viol", "mean_step_s", "final_norm"
    );
    for (i, x0) in starts.iter().enumerate() {
        let mut entries: Vec<(String, Box<dyn Policy>)> = Vec::new();
        for h in horizons {
            let mut horizon_config = config.clone();
            horizon_config.mpc.horizon = h;
            entries.push((
                format!("mpc_n{h}"),
                Box::new(MpcPolicy {
                    cond: condensed_qp(&horizon_config, &system, &model, &p)?,
                }),
            ));
        }
        for kind in &kinds {
            if *kind == PolicyKind::Mpc {
                continue;
            }
            let policy = build_policy(*kind, config, out, &system, &model, &p)?;
            let boxed: Box<dyn Policy> = match policy {
                RunPolicy::Governed(p) => Box::new(p),
                RunPolicy::DualMode(p) => Box::new(p),
                RunPolicy::Mpc(p) => Box::new(p),
                RunPolicy::Lqr(p) => Box::new(p),
                RunPolicy::Projection(p) => Box::new(p),
            };
            entries.push((kind.label().to_string(), boxed));
        }
        for (name, policy) in entries.iter_mut() {
            let traj = sim::run_closed_loop(&system, policy.as_mut(), x0, config.simulate.steps);
            let summary = sim::summarize(name, &traj);
            let total: f64 = traj.step_times.iter().sum();
            csv.push_str(&format!(
                "{i},{name},{},{},{:.6e},{:.6e},{:.6e},{}\n",
                summary.steps_taken,
                summary.violation_count,
                summary.mean_step_time,
                total,
                summary.terminal_norm,
                summary.error.as_deref().unwrap_or(""),
            ));
            println!(
                "{:<4} {:<14} {:>6} {:>6} {:>12.3e} {:>12.3e}",
                i,
                name,
                summary.steps_taken,
                summary.violation_count,
                summary.mean_step_time,
                summary.terminal_norm
            );
        }
    }
    let path = out.join("report.csv");
    std::fs::write(&path, csv)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use empc_cli::commands::{self, PolicyKind};
use empc_cli::config::PipelineConfig;
use empc_cli::CliError;

#[derive(Parser)]
#[command(
    name = "empc",
    about = "Learned explicit MPC with a safety governor: synthesis, sampling, training, simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for the stage's random draws.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Governed,
    DualMode,
    Mpc,
    Lqr,
    Projection,
}

impl From<PolicyArg> for PolicyKind {
    fn from(value: PolicyArg) -> Self {
        match value {
            PolicyArg::Governed => PolicyKind::Governed,
            PolicyArg::DualMode => PolicyKind::DualMode,
            PolicyArg::Mpc => PolicyKind::Mpc,
            PolicyArg::Lqr => PolicyKind::Lqr,
            PolicyArg::Projection => PolicyKind::Projection,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation and build the invariant sets and governor.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Sample the implicit MPC law into a training dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of samples; overrides the config's sample.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the approximator on the sampled dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run closed-loop simulations for one policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "governed")]
        policy: PolicyArg,
    },
    /// Emit the feasible regions and their areas.
    Region {
        #[command(flatten)]
        common: Common,
    },
    /// Timing/safety comparison table across policies.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(PipelineConfig, PathBuf), CliError> {
    let config = PipelineConfig::load(&common.config)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synthesize { common } => {
            let (config, out) = load(&common)?;
            commands::cmd_synthesize(&config, &out)
        }
        Command::Sample { common, count } => {
            let (config, out) = load(&common)?;
            commands::cmd_sample(&config, &out, count, common.seed)
        }
        Command::Train { common } => {
            let (config, out) = load(&common)?;
            commands::cmd_train(&config, &out, common.seed)
        }
        Command::Simulate { common, policy } => {
            let (config, out) = load(&common)?;
            commands::cmd_simulate(&config, &out, policy.into())
        }
        Command::Region { common } => {
            let (config, out) = load(&common)?;
            commands::cmd_region(&config, &out)
        }
        Command::Compare { common } => {
            let (config, out) = load(&common)?;
            commands::cmd_compare(&config, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

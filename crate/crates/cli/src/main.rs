//! Experiment harness for Bayesian inverse problems with spatiotemporal
//! observations of chaotic dynamics.

use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use stip_cli::commands::sweep::SweepAxis;
use stip_cli::output::write_atomic;
use stip_cli::pipeline::Experiment;
use stip_cli::{commands, config};

#[derive(Parser)]
#[command(
    name = "stip",
    about = "Calibration, emulation, and sampling for chaotic-dynamics inverse problems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: Option<String>,
    /// Built-in defaults for a system (lorenz63 | rossler | chen) when no
    /// config file is given.
    #[arg(long)]
    system: Option<String>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded repeats (seed + r for repeat r).
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Worker-thread limit.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory override.
    #[arg(long)]
    out: Option<String>,
    /// Override one config key by dotted path, e.g.
    /// --set calibration.J_ensemble=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the truth trajectory, its augmentation, and Gamma_obs.
    Simulate(CommonArgs),
    /// Run the configured ensemble calibration over seeded repeats.
    Calibrate(CommonArgs),
    /// Calibrate across a value grid of one configuration axis.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Axis to vary: t0, T, or J_ensemble.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Emulate the forward map and sample the posterior, with predictions.
    Uq(CommonArgs),
    /// Verify the Fisher-information order theorems on random instances.
    Fisher {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Rescale kernels past the theorem conditions (diagnostic mode).
        #[arg(long, default_value_t = false)]
        violate_condition: bool,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("STIP_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn configure_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    Ok(())
}

fn build_experiment(common: &CommonArgs) -> Result<Experiment> {
    let config = config::load_config(
        common.config.as_deref(),
        common.system.as_deref(),
        &common.sets,
        common.seed,
        common.out.as_deref(),
    )?;
    let exp = Experiment::build(config)?;
    // Materialized defaults, so runs are reproducible from the artifact.
    write_atomic(
        &commands::out_dir(&exp).join("effective_config.json"),
        &exp.config.to_json()?,
    )?;
    Ok(exp)
}

fn run() -> Result<ExitCode> {
    init_logging();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(common) => {
            configure_jobs(common.jobs)?;
            let exp = build_experiment(common)?;
            commands::simulate::run(&exp)?;
        }
        Command::Calibrate(common) => {
            configure_jobs(common.jobs)?;
            let exp = build_experiment(common)?;
            commands::calibrate::run(&exp, common.repeats)?;
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            configure_jobs(common.jobs)?;
            let axis = SweepAxis::parse(axis)?;
            let exp = build_experiment(common)?;
            commands::sweep::run(&exp.config, axis, values, common.repeats)?;
        }
        Command::Uq(common) => {
            configure_jobs(common.jobs)?;
            let exp = build_experiment(common)?;
            commands::uq::run(&exp)?;
        }
        Command::Fisher {
            common,
            trials,
            violate_condition,
        } => {
            configure_jobs(common.jobs)?;
            let out = std::path::PathBuf::from(common.out.as_deref().unwrap_or("."));
            let seed = common.seed.unwrap_or(42);
            let outcome = commands::fisher::run(*trials, seed, *violate_condition, &out)?;
            if outcome.violations_under_condition > 0 {
                eprintln!(
                    "{} Loewner-order violations under satisfied conditions",
                    outcome.violations_under_condition
                );
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end: `simulate`, `train`, `predict`, `control`, `report`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
pub use commands::{cmd_control, cmd_predict, cmd_report, cmd_simulate, cmd_train, RunContext};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "koopman-deepc", version, about = "Koopman lifting with data-driven prediction and predictive control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Override the root seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for trajectory generation and ensembles.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; defaults to the config's `output_dir`, then `runs/<name>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Record wall-clock columns (makes outputs non-reproducible).
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the trajectory dataset.
    Simulate(ConfigArg),
    /// Train the lifting network.
    Train(ConfigArg),
    /// Evaluate quadratic-loss and Wasserstein predictions on held-out data.
    Predict(ConfigArg),
    /// Run the closed loop for the controller and its baselines.
    Control(ConfigArg),
    /// Concatenate the tables of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load(arg: &ConfigArg, cli: &Cli) -> Result<(ExperimentConfig, RunContext)> {
    let mut cfg = ExperimentConfig::load(&arg.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let ctx = RunContext::new(out, cli.timing)?;
    cfg.save(ctx.path("config.json"))?;
    Ok((cfg, ctx))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => {
            let (cfg, ctx) = load(a, cli)?;
            print_json(&cmd_simulate(&cfg, &ctx)?);
        }
        Command::Train(a) => {
            let (cfg, ctx) = load(a, cli)?;
            print_json(&cmd_train(&cfg, &ctx)?);
        }
        Command::Predict(a) => {
            let (cfg, ctx) = load(a, cli)?;
            print_json(&cmd_predict(&cfg, &ctx)?);
        }
        Command::Control(a) => {
            let (cfg, ctx) = load(a, cli)?;
            print_json(&cmd_control(&cfg, &ctx)?);
        }
        Command::Report { runs } => {
            let ctx = RunContext::new(cli.out.clone().unwrap_or_else(|| PathBuf::from("report")), cli.timing)?;
            for p in cmd_report(runs, &ctx)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Error::Config(e.to_string()).exit_code();
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

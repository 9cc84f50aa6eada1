//! `dbt-recon`: simulate, reconstruct, evaluate and compare tomosynthesis runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dbt_core::config::PipelineConfig;
use dbt_core::pipeline::{self, Overrides, PipelineError};
use dbt_core::solvers::SolverKind;

#[derive(Parser)]
#[command(name = "dbt-recon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom and its noisy projections.
    Simulate(Common),
    /// Reconstruct from the simulated projections, saving checkpoint volumes.
    Reconstruct(Common),
    /// Compute CNR, widths, ASF and slice images for every checkpoint.
    Evaluate(Common),
    /// Merge the evaluations of several runs into one table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Noise seed, overriding `noise.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// sgp, fp or cp, overriding `solver.name`.
    #[arg(long)]
    solver: Option<SolverKind>,
    /// Comma-separated checkpoint iterations, overriding `solver.checkpoints`.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    /// Worker threads (all cores by default). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// One config per run; repeat the flag.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Where `comparison.csv` goes. Defaults to the first run's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ov = Overrides {
        output: common.output.clone(),
        seed: common.seed,
        solver: common.solver,
        checkpoints: common.checkpoints.clone(),
    };
    ov.apply(&mut cfg).map_err(|e| dbt_core::config::ConfigError { path: common.config.clone(), ..e })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let out = pipeline::with_threads(c.threads, || pipeline::cmd_simulate(&cfg))?;
            println!("{}", out.projections.display());
        }
        Command::Reconstruct(c) => {
            let cfg = load(&c)?;
            let out = pipeline::with_threads(c.threads, || pipeline::cmd_reconstruct(&cfg))?;
            for (want, got, path) in &out.checkpoints {
                if want == got {
                    println!("{}", path.display());
                } else {
                    println!("{} (iteration {got})", path.display());
                }
            }
            println!("{}", out.final_volume.display());
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            pipeline::with_threads(c.threads, || pipeline::cmd_evaluate(&cfg))?;
            println!("{}", pipeline::eval_dir(&cfg).join("metrics.csv").display());
        }
        Command::Compare(a) => {
            let configs = a.configs.iter().map(|p| PipelineConfig::load(p)).collect::<Result<Vec<_>, _>>()?;
            let out_dir = a.output.unwrap_or_else(|| configs[0].output_dir.clone());
            let out = pipeline::cmd_compare(&configs, &out_dir)?;
            println!("{}", out.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

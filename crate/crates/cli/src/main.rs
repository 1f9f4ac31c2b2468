use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use savflow::{rates_from_ledgers, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "savflow", version, about = "Run SAV gradient-flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; exits 2 when an acceptance threshold fails.
    Run {
        config: PathBuf,
        /// Output directory (overrides output.directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for parameter sweeps.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Convergence table from the final rows of several ledgers.
    Rates { ledger_glob: String },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, out, threads } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .context("configuring the thread pool")?;
            }
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.directory.clone());
            let outcome = run_experiment(&cfg, &dir)?;
            for c in &outcome.checks {
                println!("{}", c.line());
            }
            Ok(outcome.passed())
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: valid {} config", config.display(), cfg.experiment.label());
            Ok(true)
        }
        Command::Rates { ledger_glob } => {
            let mut paths = glob::glob(&ledger_glob)
                .with_context(|| format!("bad pattern {ledger_glob}"))?
                .collect::<Result<Vec<_>, _>>()?;
            paths.sort();
            let est = rates_from_ledgers(&paths)?;
            print!("{}", est.to_csv());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crcvoi_cli::{run, CliError, Command, Context, RunConfig};

/// Colorectal cancer natural-history calibration and value-of-information pipeline.
#[derive(Parser, Debug)]
#[command(name = "crcvoi", version)]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `seeds.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate calibration targets from the configured true parameters.
    SimulateTargets,
    /// Calibrate the natural-history model to a target file.
    Calibrate {
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Posterior predictive check against the targets.
    Validate {
        #[arg(long)]
        posterior: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Probabilistic sensitivity analysis for each configured approach.
    Psa {
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// EVPI curves from PSA result files.
    Evpi {
        /// PSA result files; the configured approaches in the output directory by default.
        #[arg(long = "psa")]
        psa: Vec<PathBuf>,
    },
    /// Concatenate the summaries found in the output directory.
    Report,
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds.master_seed = seed;
    }
    let ctx = Context::new(config, cli.out, cli.workers)?;
    let cmd = match cli.command {
        Cmd::SimulateTargets => Command::SimulateTargets,
        Cmd::Calibrate { targets } => Command::Calibrate { targets },
        Cmd::Validate { posterior, targets } => Command::Validate { posterior, targets },
        Cmd::Psa { posterior } => Command::Psa { posterior },
        Cmd::Evpi { psa } => Command::Evpi { psa },
        Cmd::Report => Command::Report,
    };
    run(&ctx, &cmd)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

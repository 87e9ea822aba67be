//! `grpo-lab train|bias-study|decompose|sweep --config <path>`.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when training
//! aborts on non-finite parameters, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grpo_lab::config::RunConfigFile;
use grpo_lab::experiments::{default_run_dir, run_command, Command};

#[derive(Parser)]
#[command(name = "grpo-lab", version, about = "Exactly enumerable GRPO / TIC-GRPO experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy and log per-update metrics.
    Train(RunArgs),
    /// Compare estimator means with the exact gradients at θ and θ_old.
    BiasStudy(RunArgs),
    /// Dump gradient decompositions along one outer step.
    Decompose(RunArgs),
    /// Run the convergence sweep and its trend checks.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory (default: `<output root>/<command>-<config stem>-seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides `output_root` in the config.
    #[arg(long, env = "GRPO_LAB_OUTPUT_ROOT", hide_env_values = true)]
    output_root: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::BiasStudy(a) => (Command::BiasStudy, a),
        Cmd::Decompose(a) => (Command::Decompose, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let mut cfg = match RunConfigFile::load(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let run_dir = args.out.unwrap_or_else(|| {
        let root = args.output_root.unwrap_or_else(|| PathBuf::from(&cfg.output_root));
        default_run_dir(&root, command, &args.config, cfg.train.seed)
    });
    match run_command(command, &cfg, &run_dir) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

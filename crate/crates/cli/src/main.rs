//! `molt` command line: experiment pipeline over a config file and an output
//! directory. Exit code is nonzero when a required significance direction is
//! inverted, so the eval subcommands can gate CI.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use molt::config::{default_config_text, ExperimentConfig};
use molt::pipeline::{Pipeline, Stage};

#[derive(Parser)]
#[command(name = "molt", about = "self-destructing modular robot experiments", version)]
struct Cli {
    /// Configuration file (TOML). Generate one with `molt init`.
    #[arg(long, global = true, default_value = "molt.toml")]
    config: PathBuf,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (0 = all cores). Results are identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Redo stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,

    /// Override the config file's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented default configuration to the --config path.
    Init,
    /// Sample the training and held-out morphologies.
    GenMorphs,
    /// Train the per-morphology expert policies (all three destruct modes).
    TrainExperts,
    /// Collect expert and proxy trajectories into dataset files.
    Collect,
    /// Distill the sequence policies from the collected datasets.
    TrainPolicy,
    /// Run every stage in order, then evaluate and validate.
    Run,
    /// Run one evaluation study and export its report and traces.
    Eval {
        /// e1 (in-distribution), e2 (held-out), or e3 (reset ablation).
        study: String,
    },
    /// Dataset subcommands.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Cross-check the config hash of every artifact in the output directory.
    Validate,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Full scan of all indexed trajectory files.
    Validate,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    if matches!(cli.command, Command::Init) {
        if cli.config.exists() && !cli.force {
            anyhow::bail!(
                "{} already exists (use --force to overwrite)",
                cli.config.display()
            );
        }
        std::fs::write(&cli.config, default_config_text())
            .with_context(|| format!("writing {}", cli.config.display()))?;
        eprintln!("wrote {}", cli.config.display());
        return Ok(true);
    }
    let cfg = load_config(&cli)?;
    let pipeline = Pipeline::new(cfg, cli.out.clone(), cli.workers, cli.force);
    match cli.command {
        Command::Init => unreachable!("handled above"),
        Command::GenMorphs => pipeline.run_stage(Stage::GenMorphs),
        Command::TrainExperts => pipeline.run_stage(Stage::TrainExperts),
        Command::Collect => pipeline.run_stage(Stage::Collect),
        Command::TrainPolicy => pipeline.run_stage(Stage::TrainPolicy),
        Command::Run => pipeline.run_stage(Stage::Run),
        Command::Eval { study } => pipeline.eval(&study),
        Command::Dataset {
            command: DatasetCommand::Validate,
        }
        | Command::Validate => pipeline.run_stage(Stage::Validate),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("a required significance direction did not hold");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use pls_core::cmdp::TabularCmdp;
use pls_core::harness::config::ExperimentKind;
use pls_core::harness::{run_experiment, safety_report, ExperimentConfig, RunOptions};

/// Safe target-return optimization experiments.
#[derive(Debug, Parser)]
#[command(name = "pls", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed of an experiment and write traces and reports.
    ///
    /// Exits with status 1 if any invariant check failed.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `master_seed` in the config).
        #[arg(short, long)]
        seed: Option<u64>,
        /// Worker threads; defaults to one per core.
        #[arg(short, long)]
        jobs: Option<usize>,
    },
    /// Safety report over a directory of traces.
    ///
    /// Exits with status 1 when the verdict is FAIL.
    Report {
        #[arg(short, long)]
        traces: PathBuf,
        /// Allowed failure probability.
        #[arg(short, long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Check a config file and/or a CMDP file without running anything.
    Validate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cmdp: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                out_dir: out,
                master_seed: seed,
                jobs,
            };
            info!("running {} ({} seeds)", cfg.name, cfg.seeds);
            let outcome = run_experiment(&cfg, &opts)?;
            print!("{}", outcome.summary_text);
            println!("output: {}", outcome.out_dir.display());
            Ok(if outcome.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Report { traces, delta } => {
            let report = safety_report(&traces, delta)?;
            println!("{report}");
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Validate { config, cmdp } => {
            if config.is_none() && cmdp.is_none() {
                bail!("nothing to validate; pass --config and/or --cmdp");
            }
            if let Some(path) = config {
                let cfg = ExperimentConfig::load(&path)?;
                if cfg.kind == ExperimentKind::Cmdp {
                    let p = cfg.cmdp_path().expect("validated");
                    TabularCmdp::load(&p).with_context(|| format!("cmdp referenced by {}", path.display()))?;
                }
                println!("{}: ok ({}, {} seeds)", path.display(), cfg.kind.as_str(), cfg.seeds);
            }
            if let Some(path) = cmdp {
                let m = TabularCmdp::load(&path).with_context(|| format!("invalid CMDP file {}", path.display()))?;
                println!(
                    "{}: ok ({} states, {} actions, horizon {})",
                    path.display(),
                    m.num_states,
                    m.num_actions,
                    m.horizon
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

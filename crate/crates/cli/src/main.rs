mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::CompareInput;
use config::{resolve, Sources, PRESETS};

#[derive(Parser)]
#[command(name = "fedcomp", version, about = "Federated averaging with rate-adaptive uplink compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a per-round compression plan and write plan.json
    Allocate(Experiment),
    /// Train one experiment and write metrics.csv and manifest.json
    Run(Experiment),
    /// Run or read several experiments and tabulate rounds, traffic and time to target accuracy
    Compare(CompareArgs),
    /// Evaluate the convergence bounds for a file of constants
    Bounds(BoundsArgs),
    /// List the built-in presets
    Presets,
}

#[derive(Args)]
struct Experiment {
    /// Built-in preset to start from
    #[arg(long)]
    preset: Option<String>,
    /// TOML overlay, or a manifest.json from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out for allocate, runs/<name> for run]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Preset to run (repeatable)
    #[arg(long)]
    preset: Vec<String>,
    /// Configuration to run (repeatable)
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Directory of a finished run to include (repeatable)
    #[arg(long)]
    run: Vec<PathBuf>,
    /// Target test accuracy (repeatable)
    #[arg(long, default_values_t = [0.8])]
    target: Vec<f64>,
    /// Master seed for every experiment that is run
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; each run goes to <out>/<name>
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    /// TOML file of problem constants
    #[arg(long)]
    config: PathBuf,
    /// Directory for bounds.json
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Allocate(a) => {
            let config = resolve(&sources(&a))?;
            commands::cmd_allocate(&config, &a.out.unwrap_or_else(|| "out".into()))?;
        }
        Command::Run(a) => {
            let config = resolve(&sources(&a))?;
            let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
            println!("{}", commands::cmd_run(&config, &out)?);
        }
        Command::Compare(a) => {
            let mut inputs = Vec::new();
            for p in &a.preset {
                inputs.push(CompareInput::Config(Box::new(resolve(&Sources {
                    preset: Some(p.clone()),
                    config: None,
                    seed: a.seed,
                })?)));
            }
            for c in &a.config {
                inputs.push(CompareInput::Config(Box::new(resolve(&Sources {
                    preset: None,
                    config: Some(c.clone()),
                    seed: a.seed,
                })?)));
            }
            inputs.extend(a.run.into_iter().map(CompareInput::RunDir));
            commands::cmd_compare(inputs, &a.target, &a.out)?;
        }
        Command::Bounds(a) => {
            commands::cmd_bounds(&a.config, a.out.as_deref())?;
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn sources(a: &Experiment) -> Sources {
    Sources {
        preset: a.preset.clone(),
        config: a.config.clone(),
        seed: a.seed,
    }
}

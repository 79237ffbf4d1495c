//! `ineq-anova`: simulate designs, fit batched-effects models, compare
//! constrained models and run the classical baselines.
//!
//! Every run writes its outputs plus `manifest.json` into `--out-dir`.
//! `replay --manifest` re-runs a manifest and reproduces the same bytes.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use commands::{ClassicalArgs, CompareArgs, FitArgs, LindleyArgs, Output, SimulateArgs};

const ARTIFACT: &str = "ineq-anova";
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "ineq-anova", version, about = "Inequality-constrained ANOVA models and variance components")]
struct Cli {
    /// Directory for every output file of the run.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: TopCommand,
}

#[derive(Subcommand, Debug)]
enum TopCommand {
    #[command(flatten)]
    Run(RunCommand),
    /// Re-run the configuration stored in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum RunCommand {
    /// Simulate a Latin-square or nested dataset with a truth sidecar.
    Simulate(SimulateArgs),
    /// Fit a batched-effects model by Gibbs sampling.
    Fit(FitArgs),
    /// Posterior probabilities of competing models.
    Compare(CompareArgs),
    /// Log Bayes factor of a zero batch variance across prior scales.
    Lindley(LindleyArgs),
    /// One-way F test or likelihood-ratio test.
    Classical(ClassicalArgs),
}

/// Fully resolved configuration of a run, echoed into every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub artifact: String,
    pub version: String,
    #[serde(flatten)]
    pub command: RunCommand,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    outputs: Vec<String>,
}

fn execute(command: RunCommand, out_dir: &Path) -> Result<()> {
    let command = command.resolve()?;
    let config = RunConfig { artifact: ARTIFACT.into(), version: VERSION.into(), command };
    let outputs = config.command.run(&config)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for Output { name, bytes } in &outputs {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    let manifest = Manifest { config, outputs: outputs.into_iter().map(|o| o.name).collect() };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, commands::pretty_json(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl RunCommand {
    /// Inline every input that is not a dataset, so a manifest alone
    /// reproduces the run.
    fn resolve(self) -> Result<Self> {
        Ok(match self {
            RunCommand::Simulate(a) => RunCommand::Simulate(a.resolve()?),
            RunCommand::Compare(a) => RunCommand::Compare(a.resolve()?),
            other => other,
        })
    }

    fn run(&self, config: &RunConfig) -> Result<Vec<Output>> {
        match self {
            RunCommand::Simulate(a) => a.run(config),
            RunCommand::Fit(a) => a.run(config),
            RunCommand::Compare(a) => a.run(config),
            RunCommand::Lindley(a) => a.run(config),
            RunCommand::Classical(a) => a.run(config),
        }
    }
}

fn replay(manifest: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
    if m.config.artifact != ARTIFACT {
        anyhow::bail!(commands::UsageError(format!("manifest belongs to {:?}, not {ARTIFACT}", m.config.artifact)));
    }
    execute(m.config.command, out_dir)
}

/// 2 for usage and configuration errors, 3 for numerical degeneracy, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ineq_anova::Error>() {
            return if e.is_numerical() {
                3
            } else if e.is_io() {
                4
            } else {
                2
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        TopCommand::Run(command) => execute(command, &cli.out_dir),
        TopCommand::Replay { manifest } => replay(&manifest, &cli.out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

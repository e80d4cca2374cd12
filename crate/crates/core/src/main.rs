use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semiwave::cli::{error_json, rerender, run_experiment, ExperimentConfig, Pipeline, RunOptions};
use semiwave::{Error, Result};

#[derive(Parser)]
#[command(name = "semiwave", version, about = "Semilinear wave experiments: forward solves, probes and recovery from boundary data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for simulated measurement noise; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the semilinear forward problem.
    Forward(Common),
    /// Check the linearization remainder of the boundary map.
    FrechetCheck(Common),
    /// Certify geometric optics probes on a frequency ladder.
    ProbeCertify(Common),
    /// Recover a potential difference on the boundary.
    RecoverBoundary(Common),
    /// Recover the nonlinear term from simulated lateral measurements.
    RecoverNonlinearity(Common),
    /// Recover the nonlinear term at the initial time.
    RecoverInitial(Common),
    /// Re-render CSV and SVG outputs from an existing report.json.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Option<PathBuf>> {
    let (pipeline, common) = match cli.command {
        Command::Report { out } => {
            rerender(&out)?;
            return Ok(Some(out));
        }
        Command::Forward(c) => (Pipeline::Forward, c),
        Command::FrechetCheck(c) => (Pipeline::FrechetCheck, c),
        Command::ProbeCertify(c) => (Pipeline::ProbeCertify, c),
        Command::RecoverBoundary(c) => (Pipeline::RecoverBoundary, c),
        Command::RecoverNonlinearity(c) => (Pipeline::RecoverNonlinearity, c),
        Command::RecoverInitial(c) => (Pipeline::RecoverInitial, c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    run_experiment(pipeline, cfg, &RunOptions { out: Some(out.clone()), seed: common.seed })?;
    Ok(Some(out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_hint = match &cli.command {
        Command::Report { out } => Some(out.clone()),
        Command::Forward(c)
        | Command::FrechetCheck(c)
        | Command::ProbeCertify(c)
        | Command::RecoverBoundary(c)
        | Command::RecoverNonlinearity(c)
        | Command::RecoverInitial(c) => c.out.clone(),
    };
    match run(cli) {
        Ok(Some(out)) => {
            println!("{}", out.join("report.json").display());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let json = error_json(&e);
            eprint!("{json}");
            if let Some(dir) = out_hint {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), &json);
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

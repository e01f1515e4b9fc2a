use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use jmcat::{FitInputs, RunConfig};
use jmcat_core::posterior::Mode;

#[derive(Parser)]
#[command(
    name = "jmcat",
    version,
    about = "Joint model of biomarker trajectories and treatment choice"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let config = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort from the configured scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the joint or covariates-only model.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        longitudinal: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// joint or categorical
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Classification metrics, random baseline, WAIC and IWRES.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
    },
    /// Permutation variable importance.
    Vi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: PathBuf,
        /// Number of permutation runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Fitted trajectories and treatment probabilities per patient.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit: PathBuf,
        /// Comma-separated patient ids; all patients when omitted.
        #[arg(long, value_delimiter = ',')]
        patients: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { common } => {
            jmcat::cmd_simulate(&common.load()?, &common.out)?;
        }
        Command::Fit {
            common,
            longitudinal,
            baseline,
            schema,
            mode,
        } => {
            let mut config = common.load()?;
            if let Some(m) = mode {
                config.mode = m;
            }
            let inputs = FitInputs {
                longitudinal,
                baseline,
                schema,
            };
            let report = jmcat::cmd_fit(&config, &inputs, &common.out)?;
            if !report.converged {
                eprintln!("{}", serde_json::to_string_pretty(&report)?);
                eprintln!(
                    "not converged: {} parameters failed R-hat/ESS checks",
                    report.failed.len()
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { common, fit } => {
            let report = jmcat::cmd_evaluate(&common.load()?, &fit, &common.out)?;
            for w in &report.model.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Vi { common, fit, runs } => {
            let mut config = common.load()?;
            if let Some(r) = runs {
                config.vi_runs = r;
            }
            jmcat::cmd_vi(&config, &fit, &common.out)?;
        }
        Command::Predict {
            common,
            fit,
            patients,
        } => {
            jmcat::cmd_predict(&fit, &patients, &common.out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

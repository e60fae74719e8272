use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use taskvec::experiment::{self, is_config_error, ExperimentConfig};
use taskvec::{plots, Error};

#[derive(Parser)]
#[command(name = "taskvec", version, about = "Train and probe task-vector models on synthetic concept data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config and write the artifact directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config and print the condition report as JSON.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render SVG panels from a run's metrics.csv.
    Plot {
        /// Run directory holding metrics.csv; plots go to <out>/plots.
        #[arg(long)]
        out: PathBuf,
        /// Read this CSV instead of <out>/metrics.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run the OOD probes against a finished run's checkpoints.
    Ood {
        /// Defaults to <out>/config.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// An error plus whether it came from reading or checking the config.
struct Failure(Error, bool);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let config = is_config_error(&e);
        Failure(e, config)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(e.into(), false)
    }
}

fn load(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<ExperimentConfig, Failure> {
    load_checked(path, seed, threads).map_err(|e| Failure(e, true))
}

fn load_checked(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<ExperimentConfig, Error> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        c.train.seed = s;
    }
    if threads.is_some() {
        c.train.threads = threads;
    }
    c.validate()?;
    Ok(c)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let c = load(&config, seed, threads)?;
            let dir = out
                .or_else(|| c.output_dir.clone())
                .ok_or_else(|| {
                    Failure(
                        Error::Config {
                            field: "output_dir".into(),
                            message: "give --out or set output_dir".into(),
                        },
                        true,
                    )
                })?;
            let run = experiment::run_config(&c, &dir)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
            eprintln!("artifacts in {}", run.dir.display());
        }
        Command::Validate { config } => {
            let report = experiment::validate_config(&config).map_err(|e| Failure(e, true))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Plot { out, csv } => {
            let csv = csv.unwrap_or_else(|| out.join("metrics.csv"));
            for f in plots::emit_plots(&csv, &out.join("plots"))? {
                println!("{}", f.display());
            }
        }
        Command::Ood { config, out, threads } => {
            let path = config.unwrap_or_else(|| out.join("config.json"));
            let c = load(&path, None, threads)?;
            let report = experiment::ood_from_run(&out, &c)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors count as config errors; clap would exit 2
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(e, config)) => {
            eprintln!("error: {e}");
            if config {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

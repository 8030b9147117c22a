use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcd_cli::report::load_assertions;
use mcd_cli::spec::{parse_for_preset, with_sweep};
use mcd_cli::{cmd_report, cmd_sweep, cmd_trace, parse_config, plan_runs, SpecError, Verdict};

#[derive(Parser)]
#[command(name = "mcdsim", version, about = "Push-based dissemination concurrency-control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the seed list with this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one parameter, either from a preset or given explicitly.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with_all = ["param", "values"])]
        preset: Option<String>,
        #[arg(long, requires = "values")]
        param: Option<String>,
        #[arg(long, value_delimiter = ',', requires = "param")]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check trend assertions against the CSVs in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON list of extra assertions.
        #[arg(long = "assert")]
        assertions: Option<PathBuf>,
    },
    /// Write the full event trace of one run and check it with the oracles.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(SpecError),
    Assertion(String),
    Other(anyhow::Error),
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<SpecError>() {
            Ok(s) => Failure::Config(s),
            Err(e) => Failure::Other(e),
        }
    }
}

fn out_dir(given: Option<PathBuf>, spec_dir: Option<PathBuf>, name: &str) -> PathBuf {
    given.or(spec_dir).unwrap_or_else(|| PathBuf::from("out").join(name))
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut spec = parse_config(&config)?;
            if let Some(s) = seed {
                spec.seeds = vec![s];
            }
            let dir = out_dir(out, spec.out_dir.clone(), &spec.name);
            let results = cmd_sweep(&spec, &dir)?;
            println!("{} runs written to {}", results.len(), dir.display());
        }
        Command::Sweep {
            config,
            preset,
            param,
            values,
            out,
        } => {
            let spec = match (preset, param) {
                (Some(p), _) => parse_for_preset(&config, &p)?,
                (None, Some(param)) => with_sweep(&parse_config(&config)?, &param, &values)?,
                (None, None) => {
                    let spec = parse_config(&config)?;
                    if spec.sweep.is_none() {
                        return Err(Failure::Config(SpecError::Missing("sweep")));
                    }
                    spec
                }
            };
            let dir = out_dir(out, spec.out_dir.clone(), &spec.name);
            println!("{} runs planned", plan_runs(&spec)?.len());
            let results = cmd_sweep(&spec, &dir)?;
            println!("{} runs written to {}", results.len(), dir.display());
        }
        Command::Report { input, assertions } => {
            let extra = match assertions {
                Some(path) => load_assertions(&path)?,
                None => Vec::new(),
            };
            let results = cmd_report(&input, &extra)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| r.verdict == Verdict::Fail).count();
            let passed = results.iter().filter(|r| r.verdict == Verdict::Pass).count();
            println!("{passed} passed, {failed} failed, {} skipped", results.len() - passed - failed);
            if failed > 0 {
                return Err(Failure::Assertion(format!("{failed} assertion(s) failed")));
            }
        }
        Command::Trace { config, out } => {
            let spec = parse_config(&config)?;
            let plan = plan_runs(&spec)?;
            let first = &plan[0];
            let check = cmd_trace(&first.config, &out)?;
            println!(
                "{} records, {} commits ({} seed {}) written to {}",
                check.records,
                check.commits,
                first.protocol,
                first.seed,
                out.display()
            );
            let verdict = |r: &Result<(), String>| match r {
                Ok(()) => "PASS".to_string(),
                Err(e) => format!("FAIL {e}"),
            };
            println!("serializability {}", verdict(&check.serializable));
            println!("lock replay {}", verdict(&check.locks));
            if !check.passed() {
                return Err(Failure::Assertion("oracle violation".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

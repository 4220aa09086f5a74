use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stosqp::bench::{emit_csv, run_experiment, summarize, ExperimentSpec};
use stosqp::nlp::analytic_suite;
use stosqp::selfcheck;

/// Experiment harness for deterministic and stochastic SQP.
#[derive(Parser)]
#[command(name = "stosqp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec (TOML) and write the results CSV.
    Run {
        spec: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output CSV; overrides `output_path` from the spec.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Check,
    /// List the registered test problems.
    ListProblems,
}

const DEFAULT_OUTPUT: &str = "results.csv";

fn run(spec_path: PathBuf, jobs: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let spec = ExperimentSpec::load(&spec_path)?;
    let out = out
        .or_else(|| spec.output_path.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let results = run_experiment(&spec, jobs)?;
    emit_csv(&results, &out).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", summarize(&results));
    let failed: Vec<_> = results
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| (r, e)))
        .collect();
    for (r, e) in &failed {
        eprintln!(
            "{} {} {} sigma_sq={} seed={}: {e}",
            r.problem, r.algorithm, r.schedule, r.sigma_sq, r.seed
        );
    }
    eprintln!("{} runs written to {}", results.len(), out.display());
    Ok(())
}

fn check() -> bool {
    let mut ok = true;
    for c in selfcheck::run_all() {
        println!(
            "{} {:<44} {} ({:.2}s)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            c.seconds
        );
        ok &= c.passed;
    }
    ok
}

fn list_problems() {
    println!("{:<16} {:>3} {:>3}  start", "name", "d", "m");
    for e in analytic_suite() {
        let p = e.problem.as_ref();
        let start: Vec<String> = e.start.x.iter().map(|v| v.to_string()).collect();
        println!(
            "{:<16} {:>3} {:>3}  ({})",
            p.name(),
            p.dim(),
            p.num_constraints(),
            start.join(", ")
        );
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { spec, jobs, out } => match run(spec, jobs, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Check => {
            if check() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::ListProblems => {
            list_problems();
            ExitCode::SUCCESS
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use keystone_bench::config::{RunConfig, Variant};
use keystone_bench::report::write_report;
use keystone_bench::run::run_experiment;
use keystone_bench::verify::verify_out_dir;

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Benchmark harness for the transactional actor runtime",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment described by a JSON config file.
    Run {
        /// Path to the run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Result directory; artifacts land in a per-variant subdirectory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's variant (actor-snapshot, actor-incremental,
        /// key-incremental, non-txn).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Replay the logs of every run in a result directory and re-check
    /// state digests and workload invariants.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a result directory as report.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run { config, out, seed, variant } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(v) = &variant {
                cfg.variant = Variant::parse(v)?;
            }
            let outcome = run_experiment(&cfg, &out)?;
            let s = &outcome.summary;
            println!(
                "{}: {} committed in {:.2}s ({:.0} txn/s), {} aborted attempt(s), artifacts in {}",
                s.variant,
                s.measured.txns,
                s.measured.secs,
                s.measured.throughput_txn_per_sec,
                s.measured.aborted_attempts,
                outcome.dir.display()
            );
            if s.measured.tolerated_errors > 0 {
                println!(
                    "note: {} submission(s) ended in tolerated errors",
                    s.measured.tolerated_errors
                );
            }
            if s.invariant_violations.is_empty() {
                println!("invariants: ok");
                Ok(ExitCode::SUCCESS)
            } else if cfg.variant.is_transactional() {
                eprintln!("invariants: {} violation(s)", s.invariant_violations.len());
                for line in &s.invariant_violations {
                    eprintln!("  {line}");
                }
                Ok(ExitCode::FAILURE)
            } else {
                println!(
                    "invariants: {} violation(s) — expected for the unprotected baseline",
                    s.invariant_violations.len()
                );
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Verify { out } => {
            let report = verify_out_dir(&out)?;
            for line in &report.lines {
                println!("{line}");
            }
            if report.failures > 0 {
                eprintln!("verification FAILED: {} defect(s) in {} run(s)", report.failures, report.runs);
                Ok(ExitCode::FAILURE)
            } else {
                println!("verification passed: {} run(s)", report.runs);
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Report { out } => {
            let (path, rows) = write_report(&out)?;
            println!("wrote {} ({} row(s))", path.display(), rows);
            Ok(ExitCode::SUCCESS)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use genie_core::crypto::Digest;
use genie_core::harness::{load_scenario, run_to_dir, verify};
use genie_core::repository::DirStore;

#[derive(Parser)]
#[command(
    name = "genie",
    version,
    about = "Run, verify, and inspect marketplace simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write chain.dump, trace.log, report.json, and repo/.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-validate a chain dump from the file alone.
    Verify {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Print a repository object after checking its hash.
    Inspect {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        hash: String,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let output = run_to_dir(&sc, &out)?;
            let report = &output.report;
            for inv in &report.invariants {
                let verdict = if inv.ok() { "PASS" } else { "FAIL" };
                let note = if inv.expected_failure {
                    " (expected to fail)"
                } else {
                    ""
                };
                println!("{verdict} {}{note}: {}", inv.name, inv.detail);
            }
            println!(
                "{} seed={} blocks={} wall={}ms -> {}",
                report.scenario,
                report.seed,
                report.blocks,
                report.wall_ms,
                if report.passed { "ok" } else { "FAILED" }
            );
            Ok(report.passed)
        }
        Command::Verify { chain } => match verify(&chain) {
            Ok(n) => {
                println!("ok: {n} blocks");
                Ok(true)
            }
            Err(e) => {
                println!("invalid: {e}");
                Ok(false)
            }
        },
        Command::Inspect { repo, hash } => {
            let hash = Digest::from_hex(&hash).context("hash must be 64 hex characters")?;
            let store = DirStore::open(&repo);
            match store
                .get(&hash)
                .with_context(|| format!("reading {}", repo.display()))?
            {
                Some(bytes) => {
                    println!("hash: {hash}");
                    println!("size: {} bytes (content verified)", bytes.len());
                    match std::str::from_utf8(&bytes) {
                        Ok(text) => print!("{text}"),
                        Err(_) => println!("{}", hex::encode(&bytes)),
                    }
                    Ok(true)
                }
                None => {
                    println!("not found or corrupt: {hash}");
                    Ok(false)
                }
            }
        }
    }
}

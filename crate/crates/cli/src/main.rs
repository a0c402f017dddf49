//! `optplan` command-line front end.

mod config;
mod fit;
mod plan;
mod report;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use optplan_core::build_graph;

use crate::config::PlanConfig;

#[derive(Parser)]
#[command(name = "optplan", version, about = "Plan staged training schedules over a transition graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore the transition graph against a trainer and write the best plan.
    Plan {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the existing ledger instead of starting over.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit learning curves from a line-delimited corpus.
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "exp")]
        family: fit::FamilyArg,
        /// Fit records; defaults to `<corpus>.fits.jsonl`. Averages go to `<out>.summary.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render CSV tables and SVG plots from a run ledger.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the transition graph described by a plan config.
    Graph {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the synthetic trainer over stdin/stdout or TCP.
    Simtrainer {
        /// Built-in scenario name or scenario file.
        #[arg(long, default_value = "kinetics-like")]
        scenario: String,
        /// Accept TCP connections on this address instead of using stdio.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Check a trainer command against the protocol transcripts.
    Conformance {
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Plan {
            config,
            resume,
            workers,
            seed,
        } => plan::run(plan::PlanArgs {
            config: &config,
            resume,
            workers,
            seed,
        })?,
        Command::Fit { corpus, family, out } => fit::run(&corpus, family, out.as_deref())?,
        Command::Report { ledger, out } => {
            let s = report::run(&ledger, &out)?;
            println!(
                "{} ledger entries, {} transitions{}; report written to {}",
                s.entries,
                s.transitions,
                if s.truncated { " (ledger truncated)" } else { "" },
                out.display()
            );
        }
        Command::Graph { config } => {
            let cfg = PlanConfig::load(&config)?;
            let graph = build_graph(&cfg.graph).context("invalid graph settings")?;
            print!("{}", graph.to_document());
        }
        Command::Simtrainer { scenario, listen } => serve::simtrainer(&scenario, listen.as_deref())?,
        Command::Conformance { timeout_secs, command } => {
            return serve::conformance(&command, Duration::from_secs(timeout_secs));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OPTPLAN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Batch CLI for the gift-contagion simulation and estimation pipeline.
//!
//! Exit codes: 0 = pass, 1 = check failure or aborted stage, 2 = usage or
//! configuration error. `HONGBAO_SEED` overrides the configured seed.

mod commands;
mod config;
mod csvio;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hongbao", version, about = "Red-packet gift contagion: simulation and causal-inference pipeline")]
struct Cli {
    /// Run configuration (TOML, flat dotted keys). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set behavior.theta_ext=0.003
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory (defaults to the configured output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic population (members.csv, edges.csv, groups.csv).
    Gen,
    /// Simulate the gift event stream (events.csv); requires gen outputs.
    Simulate,
    /// Build the recipient x spontaneous-packet panel (panel.csv).
    Panel,
    /// Run the regression battery on panel.csv (report.csv, summary.txt).
    Estimate,
    /// Exact one-to-many matching and contrasts (matched.csv).
    Match,
    /// Per-stratum randomization checks with BH correction.
    RandomizationCheck,
    /// Monte Carlo verification of the amount-allocation algorithm.
    VerifySplitter {
        /// Packet total in cents.
        #[arg(long, default_value_t = 1000)]
        amount_cents: i64,
        /// Number of recipients.
        #[arg(long, default_value_t = 5)]
        recipients: u32,
        /// Monte Carlo draws per order.
        #[arg(long, default_value_t = 1_000_000)]
        reps: usize,
        /// Seed for the verification streams.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run every stage end to end and emit all artifacts.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            // Aborted stages are runtime failures (1); everything else
            // reaching here is a usage/config error (2).
            if e.downcast_ref::<commands::StageFailure>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    // verify-splitter takes its own seed and needs no config file.
    if let Command::VerifySplitter { amount_cents, recipients, reps, seed } = cli.command {
        init_workers(cli.workers.unwrap_or(0));
        return commands::cmd_verify_splitter(&commands::VerifyArgs {
            amount_cents,
            recipients,
            reps,
            seed,
        });
    }

    let config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    init_workers(cli.workers.unwrap_or(config.workers));

    match cli.command {
        Command::Gen => commands::cmd_gen(&config, &cli.out),
        Command::Simulate => commands::cmd_simulate(&config, &cli.out),
        Command::Panel => commands::cmd_panel(&config, &cli.out),
        Command::Estimate => commands::cmd_estimate(&config, &cli.out),
        Command::Match => commands::cmd_match(&config, &cli.out),
        Command::RandomizationCheck => commands::cmd_randomization_check(&config, &cli.out),
        Command::VerifySplitter { .. } => unreachable!("handled above"),
        Command::Pipeline => commands::cmd_pipeline(&config, &cli.out),
    }
}

fn init_workers(n: usize) {
    if n > 0 {
        // Ignore the error if a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

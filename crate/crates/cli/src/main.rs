//! `pgnn`: generate channels, train and evaluate precoding policies, run
//! sweeps and count FLOPs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

mod commands;
mod config;
mod error;
mod manifest;
mod oracle;
mod policy;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::SweepKind;
use crate::config::{ArchName, Config, LossName, OracleName, Overrides};
use crate::error::{usage, CliResult};

#[derive(Parser, Debug)]
#[command(name = "pgnn", version, about = "Learned and classical MU-MISO precoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    arch: Option<ArchName>,
    #[arg(long, value_enum)]
    loss: Option<LossName>,
    #[arg(long, value_enum)]
    oracle: Option<OracleName>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a channel dataset.
    Gen(RunArgs),
    /// Train a GNN policy and checkpoint it.
    Train(RunArgs),
    /// Evaluate a checkpoint or a closed-form policy.
    Eval(RunArgs),
    /// Seed-averaged metrics over an SNR, user-count or sample-count grid.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the forward FLOP count of a GNN.
    Flops {
        #[arg(long, value_enum)]
        arch: ArchName,
        #[arg(long)]
        antennas: usize,
        #[arg(long)]
        users: usize,
        /// Comma-separated `[2, .., 2]`; default widths when absent.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
}

fn load(run: &RunArgs, command: &str) -> CliResult<Config> {
    let mut cfg = Config::load(&run.config)?;
    let o = Overrides { seed: run.seed, arch: run.arch, loss: run.loss, oracle: run.oracle };
    cfg.apply(&o, command);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(run) => commands::gen(&load(&run, "gen")?, &run.out),
        Command::Train(run) => commands::train(&load(&run, "train")?, &run.out),
        Command::Eval(run) => commands::eval(&load(&run, "eval")?, &run.out),
        Command::Sweep { kind, run } => commands::sweep(&load(&run, "sweep")?, kind, &run.out),
        Command::Flops { arch, antennas, users, widths } => {
            if antennas == 0 || users == 0 {
                return Err(usage("antennas and users must be >= 1"));
            }
            println!("{}", commands::flops(arch, antennas, users, widths)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

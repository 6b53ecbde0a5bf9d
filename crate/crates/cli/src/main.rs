use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mceend::Error;

mod commands;
mod config;

use config::RunConfig;

/// Multi-channel end-to-end neural speaker diarization.
#[derive(Parser, Debug)]
#[command(name = "mceend", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of multi-channel conversations.
    Simulate(Flags),
    /// Train a model from scratch or resume from `checkpoint`.
    Train(Flags),
    /// Fine-tune a checkpoint at a fixed learning rate.
    Adapt(Flags),
    /// Decode sessions into RTTM files and posterior dumps.
    Infer(Flags),
    /// Compute DER of hypothesis RTTMs against references.
    Score(Flags),
    /// Report activation counts and measured tape memory per channel count.
    Bench(Flags),
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// 2 config, 3 data, 4 numeric divergence, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        Error::Backward(_) => 1,
        _ => 3,
    }
}

fn run(cli: Cli) -> mceend::Result<()> {
    let (flags, cmd): (&Flags, fn(RunConfig) -> mceend::Result<()>) = match &cli.command {
        Command::Simulate(f) => (f, commands::simulate),
        Command::Train(f) => (f, commands::train),
        Command::Adapt(f) => (f, commands::adapt),
        Command::Infer(f) => (f, commands::infer),
        Command::Score(f) => (f, commands::score),
        Command::Bench(f) => (f, commands::bench),
    };
    let cfg = RunConfig::load(&flags.config)?.resolve(flags.seed, flags.out.clone());
    cmd(cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `bnpbss`: separate mixtures, build test mixtures, score results and run
//! parameter sweeps. Only a one-line summary goes to stdout; everything
//! else is written to files.

mod bench;
mod config;
mod error;
mod eval;
mod mix;
mod separate;
mod signals;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bnpbss", version, about = "Determined blind source separation with non-parametric NMF source models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Separate a multichannel mixture into one WAV per source.
    Separate(separate::SeparateArgs),
    /// Mix mono sources through a matrix, RIR files or synthetic RIRs.
    Mix(mix::MixArgs),
    /// Score estimates against references and append to a CSV.
    Eval(eval::EvalArgs),
    /// Run a sweep of algorithms, basis counts, seeds and mixtures.
    Bench(bench::BenchArgs),
}

/// Caps the global thread pool at `BNPBSS_THREADS`.
fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BNPBSS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("BNPBSS_THREADS must be a positive integer, got '{raw}'")))?;
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.min(available))
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|()| match &cli.command {
        Command::Separate(a) => separate::run(a),
        Command::Mix(a) => mix::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Bench(a) => bench::run(a),
    });
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

use std::fs::OpenOptions;
use std::path::PathBuf;

use bnpbss::eval::{evaluate_signals, DEFAULT_FILTER_LEN};
use clap::Args;

use crate::error::{io_err, CliError, CliResult};
use crate::signals::{load_stacked, require_all};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated sources; channels of all files are taken in order.
    #[arg(long, num_args = 1.., required = true)]
    pub estimates: Vec<PathBuf>,
    /// Reference sources, same convention.
    #[arg(long, num_args = 1.., required = true)]
    pub references: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FILTER_LEN)]
    pub filter_len: usize,
    /// CSV file to append to; the header is written when it is new or empty.
    #[arg(long)]
    pub csv: PathBuf,
    /// Value of the run_id column (default: first estimate path).
    #[arg(long)]
    pub run_id: Option<String>,
}

pub const HEADER: [&str; 6] = ["run_id", "source", "sdr_db", "sir_db", "sar_db", "permutation"];

pub fn run(args: &EvalArgs) -> CliResult<String> {
    require_all(&args.estimates)?;
    require_all(&args.references)?;
    let est = load_stacked(&args.estimates)?;
    let refs = load_stacked(&args.references)?;
    if est.channels() != refs.channels() {
        return Err(CliError::usage(format!(
            "{} estimates for {} references",
            est.channels(),
            refs.channels()
        )));
    }
    if est.num_samples() != refs.num_samples() {
        return Err(CliError::usage(format!(
            "estimates have {} samples, references {}",
            est.num_samples(),
            refs.num_samples()
        )));
    }
    let scores = evaluate_signals(&est, &refs, args.filter_len)?;

    let fresh = std::fs::metadata(&args.csv).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.csv)
        .map_err(io_err(&args.csv))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::io(format!("{}: {e}", args.csv.display()));
    if fresh {
        w.write_record(HEADER).map_err(csv_err)?;
    }
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| args.estimates[0].display().to_string());
    for e in 0..scores.sdr.len() {
        w.write_record([
            run_id.clone(),
            e.to_string(),
            format!("{:.4}", scores.sdr[e]),
            format!("{:.4}", scores.sir[e]),
            format!("{:.4}", scores.sar[e]),
            scores.permutation[e].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&args.csv))?;
    Ok(format!(
        "evaluated {} sources: mean SDR {:.2} dB, SIR {:.2} dB, SAR {:.2} dB -> {}",
        scores.sdr.len(),
        scores.mean_sdr(),
        scores.mean_sir(),
        scores.mean_sar(),
        args.csv.display()
    ))
}

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use bnpbss::eval::{evaluate_signals, DEFAULT_FILTER_LEN};
use bnpbss::separator::separate;
use bnpbss::{Algorithm, MultichannelSignal, SeparationConfig};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, BenchSpec};
use crate::error::{io_err, CliError, CliResult};
use crate::signals::{load_stacked, read, require_all};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON sweep file with a `bench` section.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub const HEADER: [&str; 10] = [
    "algorithm",
    "K",
    "seed",
    "mixture_id",
    "sdr",
    "sir",
    "sar",
    "active_bases_final",
    "seconds",
    "status",
];

struct Job {
    algorithm: Algorithm,
    config: SeparationConfig,
    mixture: usize,
}

struct Outcome {
    sdr: f64,
    sir: f64,
    sar: f64,
    active: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct CellSummary {
    algorithm: &'static str,
    k: usize,
    runs: usize,
    failed: usize,
    mean_sdr: Option<f64>,
    mean_sir: Option<f64>,
    mean_sar: Option<f64>,
    /// Per source, averaged over successful runs.
    mean_active_bases: Vec<f64>,
    mean_seconds: Option<f64>,
}

fn jobs(spec: &BenchSpec, file: &config::RunConfigFile) -> Vec<Job> {
    let seeds = spec.seeds();
    let mut out = Vec::new();
    for mixture in 0..spec.mixtures.len() {
        for cell in &spec.cells {
            let ks: Vec<Option<usize>> = if cell.bases.is_empty() {
                vec![None]
            } else {
                cell.bases.iter().copied().map(Some).collect()
            };
            for k in ks {
                for &seed in &seeds {
                    let mut config = file.separation.build(cell.algorithm, k);
                    config.seed = seed;
                    config.parallel = spec.intra_cell_parallel;
                    out.push(Job {
                        algorithm: cell.algorithm,
                        config,
                        mixture,
                    });
                }
            }
        }
    }
    out
}

fn run_job(job: &Job, mix: &MultichannelSignal, refs: &MultichannelSignal, filter_len: usize) -> CliResult<Outcome> {
    let result = separate(mix, &job.config)?;
    let scores = evaluate_signals(&result.sources, refs, filter_len)?;
    Ok(Outcome {
        sdr: scores.mean_sdr(),
        sir: scores.mean_sir(),
        sar: scores.mean_sar(),
        active: result.models.iter().map(|m| m.active_bases()).collect(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn run(args: &BenchArgs) -> CliResult<String> {
    let file = config::load(&args.config)?;
    let spec = file
        .bench
        .clone()
        .ok_or_else(|| CliError::usage(format!("{}: no `bench` section", args.config.display())))?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| file.out_dir.clone())
        .ok_or_else(|| CliError::usage("--out-dir is required (flag or config)"))?;
    if spec.cells.is_empty() || spec.mixtures.is_empty() || spec.seeds().is_empty() {
        return Err(CliError::usage("bench needs at least one cell, mixture and seed"));
    }
    for m in &spec.mixtures {
        config::require_file(&m.mixture)?;
        require_all(&m.references)?;
    }
    config::prepare_dir(&out_dir)?;

    let inputs = spec
        .mixtures
        .iter()
        .map(|m| Ok((read(&m.mixture)?, load_stacked(&m.references)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let filter_len = file.filter_len.unwrap_or(DEFAULT_FILTER_LEN);
    let jobs = jobs(&spec, &file);
    let results: Vec<(CliResult<Outcome>, f64)> = jobs
        .par_iter()
        .map(|job| {
            let (mix, refs) = &inputs[job.mixture];
            let start = Instant::now();
            let r = run_job(job, mix, refs, filter_len);
            (r, start.elapsed().as_secs_f64())
        })
        .collect();

    let csv_path = out_dir.join("results.csv");
    let csv_err = |e: csv::Error| CliError::io(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for (job, (res, secs)) in jobs.iter().zip(&results) {
        let mut row = vec![
            job.algorithm.name().to_string(),
            job.config.bases.to_string(),
            job.config.seed.to_string(),
            spec.mixtures[job.mixture].id.clone(),
        ];
        match res {
            Ok(o) => {
                let active: Vec<String> = o.active.iter().map(usize::to_string).collect();
                row.extend([
                    o.sdr.to_string(),
                    o.sir.to_string(),
                    o.sar.to_string(),
                    active.join(";"),
                    format!("{secs:.3}"),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                row.extend(["", "", "", ""].map(String::from));
                row.extend([format!("{secs:.3}"), format!("error (exit {}): {e}", e.code())]);
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    // one summary entry per (algorithm, K), in first-seen order
    let mut cells: Vec<(Algorithm, usize)> = Vec::new();
    for job in &jobs {
        if !cells.contains(&(job.algorithm, job.config.bases)) {
            cells.push((job.algorithm, job.config.bases));
        }
    }
    let summary: Vec<CellSummary> = cells
        .iter()
        .map(|&(algorithm, k)| {
            let rows: Vec<_> = jobs
                .iter()
                .zip(&results)
                .filter(|(j, _)| j.algorithm == algorithm && j.config.bases == k)
                .map(|(_, r)| r)
                .collect();
            let ok: Vec<(&Outcome, f64)> = rows.iter().filter_map(|(r, s)| r.as_ref().ok().map(|o| (o, *s))).collect();
            let sources = ok.first().map_or(0, |(o, _)| o.active.len());
            CellSummary {
                algorithm: algorithm.name(),
                k,
                runs: rows.len(),
                failed: rows.len() - ok.len(),
                mean_sdr: mean(ok.iter().map(|(o, _)| o.sdr)),
                mean_sir: mean(ok.iter().map(|(o, _)| o.sir)),
                mean_sar: mean(ok.iter().map(|(o, _)| o.sar)),
                mean_active_bases: (0..sources)
                    .map(|m| mean(ok.iter().map(|(o, _)| o.active[m] as f64)).unwrap_or(0.0))
                    .collect(),
                mean_seconds: mean(ok.iter().map(|(_, s)| *s)),
            }
        })
        .collect();
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::io(e.to_string()))?;
    fs::write(&summary_path, text + "\n").map_err(io_err(&summary_path))?;

    let failed = results.iter().filter(|(r, _)| r.is_err()).count();
    if failed == results.len() {
        let (first, _) = results.into_iter().next().expect("at least one job");
        return Err(first.err().expect("all rows failed"));
    }
    Ok(format!(
        "bench: {} runs ({} failed) over {} cells -> {}",
        results.len(),
        failed,
        cells.len(),
        out_dir.display()
    ))
}

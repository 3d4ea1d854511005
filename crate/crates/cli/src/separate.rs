use std::fs;
use std::path::PathBuf;

use bnpbss::audio::{read_wav, write_wav, WavEncoding};
use bnpbss::eval::{evaluate_signals, DEFAULT_FILTER_LEN};
use bnpbss::separator::separate;
use bnpbss::{Algorithm, Diagnostics, MultichannelSignal, SeparationConfig};
use clap::Args;
use serde::Serialize;

use crate::config::{self, RunConfigFile};
use crate::error::{io_err, CliError, CliResult};
use crate::signals::load_stacked;

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Multichannel mixture WAV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// auxiva, ilrma or vb.
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub bases: Option<usize>,
    /// Spread per-source and per-bin work over the thread pool.
    #[arg(long)]
    pub parallel: bool,
    /// Encoding of the separated WAVs.
    #[arg(long, value_enum, default_value = "float32")]
    pub encoding: EncodingArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EncodingArg {
    Pcm16,
    Float32,
}

impl From<EncodingArg> for WavEncoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Pcm16 => WavEncoding::Pcm16,
            EncodingArg::Float32 => WavEncoding::Float32,
        }
    }
}

#[derive(Debug, Serialize)]
struct Scores {
    sdr: Vec<f64>,
    sir: Vec<f64>,
    sar: Vec<f64>,
    permutation: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsFile<'a> {
    input: String,
    config: &'a SeparationConfig,
    cost_trace: &'a [f64],
    active_bases: &'a [Vec<usize>],
    wall_time_secs: f64,
    sources: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Scores>,
}

/// Resolves defaults < config file < flags.
fn resolve(args: &SeparateArgs) -> CliResult<(RunConfigFile, SeparationConfig, PathBuf, PathBuf)> {
    let file = match &args.config {
        Some(p) => config::load(p)?,
        None => RunConfigFile::default(),
    };
    let algorithm = args
        .algo
        .or(file.separation.algorithm)
        .unwrap_or(Algorithm::VbNonparametric);
    let mut cfg = file.separation.build(algorithm, args.bases);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.iters {
        cfg.iterations = iters;
    }
    cfg.parallel |= args.parallel;
    let input = args
        .input
        .clone()
        .or_else(|| file.input.clone())
        .ok_or_else(|| CliError::usage("--input is required"))?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| file.out_dir.clone())
        .ok_or_else(|| CliError::usage("--out-dir is required"))?;
    Ok((file, cfg, input, out_dir))
}

pub fn run(args: &SeparateArgs) -> CliResult<String> {
    let (file, cfg, input, out_dir) = resolve(args)?;
    config::require_file(&input)?;
    for r in &file.references {
        config::require_file(r)?;
    }
    config::prepare_dir(&out_dir)?;

    let mixture = read_wav(&input).map_err(|e| CliError::from_lib(&input.display().to_string(), e))?;
    if mixture.channels() < 2 {
        return Err(CliError::usage("determined separation requires M ≥ 2"));
    }
    cfg.validate(mixture.channels())?;
    let references = if file.references.is_empty() {
        None
    } else {
        Some(load_stacked(&file.references)?)
    };

    let result = separate(&mixture, &cfg)?;

    let encoding = WavEncoding::from(args.encoding);
    let mut names = Vec::new();
    for m in 0..result.sources.channels() {
        let path = out_dir.join(format!("source_{m}.wav"));
        let mono = MultichannelSignal::from_channels(&[result.sources.channel(m)?], result.sources.sample_rate())?;
        write_wav(&path, &mono, encoding).map_err(|e| CliError::from_lib(&path.display().to_string(), e))?;
        names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }

    let scores = match &references {
        Some(refs) => {
            let s = evaluate_signals(&result.sources, refs, file.filter_len.unwrap_or(DEFAULT_FILTER_LEN))?;
            Some(Scores {
                sdr: s.sdr,
                sir: s.sir,
                sar: s.sar,
                permutation: s.permutation,
            })
        }
        None => None,
    };
    let Diagnostics {
        cost_trace,
        active_bases,
        wall_time,
    } = &result.diagnostics;
    let mean_sdr = scores.as_ref().map(|s| s.sdr.iter().sum::<f64>() / s.sdr.len() as f64);
    let doc = DiagnosticsFile {
        input: input.display().to_string(),
        config: &cfg,
        cost_trace,
        active_bases,
        wall_time_secs: *wall_time,
        sources: names,
        scores,
    };
    let path = out_dir.join("diagnostics.json");
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::io(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;

    let mut summary = format!(
        "separated {} sources with {} in {:.2} s ({} iterations) -> {}",
        result.sources.channels(),
        cfg.algorithm.name(),
        wall_time,
        cost_trace.len(),
        out_dir.display()
    );
    if let Some(sdr) = mean_sdr {
        summary.push_str(&format!(", mean SDR {sdr:.2} dB"));
    }
    Ok(summary)
}

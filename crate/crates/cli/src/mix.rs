use std::fs;
use std::path::{Path, PathBuf};

use bnpbss::audio::{write_wav, WavEncoding};
use bnpbss::mixgen::{convolve_mix, synth_room, MixSpec, Mixing};
use clap::Args;
use ndarray::Array2;
use serde::Serialize;

use crate::config::{prepare_dir, SCHEMA_VERSION};
use crate::error::{io_err, CliError, CliResult};
use crate::separate::EncodingArg;
use crate::signals::{read, require_all};

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Mono source WAVs.
    #[arg(long, num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    /// Impulse responses: one M-channel WAV per source, or M mono WAVs per
    /// source in source-major order.
    #[arg(long, num_args = 1.., group = "mixing")]
    pub rir: Vec<PathBuf>,
    /// Instantaneous M x N matrix as JSON (inline or a file path).
    #[arg(long, group = "mixing")]
    pub matrix: Option<String>,
    /// Synthetic exponential-decay RIRs with this T60 in milliseconds.
    #[arg(long, group = "mixing")]
    pub t60: Option<f64>,
    /// Microphones for synthetic RIRs (default: one per source).
    #[arg(long)]
    pub mics: Option<usize>,
    /// RIR length in samples for synthetic RIRs (default: 1.5 T60).
    #[arg(long)]
    pub taps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "float32")]
    pub encoding: EncodingArg,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MixingRecord {
    Instantaneous { matrix: Vec<Vec<f64>> },
    RirFiles { files: Vec<String> },
    SyntheticRir { t60_ms: f64, taps: usize },
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema_version: u32,
    output: String,
    sources: Vec<String>,
    sample_rate: u32,
    num_samples: usize,
    mics: usize,
    seed: u64,
    mixing: MixingRecord,
}

fn parse_matrix(arg: &str) -> CliResult<Array2<f64>> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).map_err(io_err(Path::new(arg)))?
    } else {
        arg.to_owned()
    };
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("--matrix is not a JSON matrix: {e}")))?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::usage("--matrix must be a non-empty rectangular array of rows"));
    }
    Ok(Array2::from_shape_fn((rows.len(), cols), |(m, n)| rows[m][n]))
}

fn load_rirs(paths: &[PathBuf], sources: usize) -> CliResult<Vec<Array2<f64>>> {
    let rirs = paths.iter().map(|p| read(p)).collect::<CliResult<Vec<_>>>()?;
    if rirs.len() == sources {
        return Ok(rirs.into_iter().map(|r| r.into_samples()).collect());
    }
    if rirs.len() % sources != 0 || rirs.iter().any(|r| r.channels() != 1) {
        return Err(CliError::usage(format!(
            "{} RIR files for {sources} sources: give one multichannel file per source or mono files in source-major order",
            rirs.len()
        )));
    }
    let mics = rirs.len() / sources;
    rirs.chunks(mics)
        .map(|group| {
            let taps = group[0].num_samples();
            if group.iter().any(|r| r.num_samples() != taps) {
                return Err(CliError::usage("RIRs of one source differ in length"));
            }
            Ok(Array2::from_shape_fn((mics, taps), |(m, t)| group[m].samples()[[0, t]]))
        })
        .collect()
}

pub fn run(args: &MixArgs) -> CliResult<String> {
    require_all(&args.sources)?;
    require_all(&args.rir)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    let sources = args.sources.iter().map(|p| read(p)).collect::<CliResult<Vec<_>>>()?;
    let rate = sources[0].sample_rate();
    let (mixing, record) = if let Some(m) = &args.matrix {
        let a = parse_matrix(m)?;
        let record = MixingRecord::Instantaneous {
            matrix: a.outer_iter().map(|r| r.to_vec()).collect(),
        };
        (Mixing::Instantaneous(a), record)
    } else if !args.rir.is_empty() {
        let record = MixingRecord::RirFiles {
            files: args.rir.iter().map(|p| p.display().to_string()).collect(),
        };
        (Mixing::Convolutive(load_rirs(&args.rir, sources.len())?), record)
    } else if let Some(t60_ms) = args.t60 {
        if !(t60_ms > 0.0) {
            return Err(CliError::usage("--t60 must be positive"));
        }
        let t60 = t60_ms / 1000.0;
        let taps = args.taps.unwrap_or((1.5 * t60 * rate as f64).ceil() as usize).max(1);
        let mics = args.mics.unwrap_or(sources.len());
        let rirs = synth_room(t60, taps, mics, sources.len(), args.seed, rate)?;
        (Mixing::Convolutive(rirs), MixingRecord::SyntheticRir { t60_ms, taps })
    } else {
        return Err(CliError::usage("one of --matrix, --rir or --t60 is required"));
    };

    let mixture = convolve_mix(&MixSpec { sources, mixing })?;
    write_wav(&args.out, &mixture, WavEncoding::from(args.encoding))
        .map_err(|e| CliError::from_lib(&args.out.display().to_string(), e))?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        output: args.out.display().to_string(),
        sources: args.sources.iter().map(|p| p.display().to_string()).collect(),
        sample_rate: mixture.sample_rate(),
        num_samples: mixture.num_samples(),
        mics: mixture.channels(),
        seed: args.seed,
        mixing: record,
    };
    let path = args.out.with_file_name("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(format!(
        "mixed {} sources into {} channels -> {}",
        args.sources.len(),
        mixture.channels(),
        args.out.display()
    ))
}

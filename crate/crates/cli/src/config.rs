//! The JSON run configuration shared by `separate` and `bench`.

use std::fs;
use std::path::{Path, PathBuf};

use bnpbss::{Algorithm, BetaTightening, SeparationConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub separation: SeparationOverrides,
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Clean sources; when given, `separate` also scores its output.
    #[serde(default)]
    pub references: Vec<PathBuf>,
    pub filter_len: Option<usize>,
    pub bench: Option<BenchSpec>,
}

/// Any subset of `SeparationConfig`; missing keys keep the per-algorithm
/// defaults.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationOverrides {
    pub algorithm: Option<Algorithm>,
    pub bases: Option<usize>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub c0: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub window_ms: Option<f64>,
    pub hop_ms: Option<f64>,
    pub ref_channel: Option<usize>,
    pub prune_threshold: Option<f64>,
    pub prune_burn_in: Option<usize>,
    pub beta_tightening: Option<BetaTightening>,
    pub parallel: Option<bool>,
}

impl SeparationOverrides {
    /// Builds the configuration for `algorithm` with `bases` bases. `c0`
    /// follows `1/K` unless set explicitly.
    pub fn build(&self, algorithm: Algorithm, bases: Option<usize>) -> SeparationConfig {
        let mut c = SeparationConfig::for_algorithm(algorithm);
        if let Some(k) = bases.or(self.bases) {
            c = c.with_bases(k);
        }
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        apply!(a0, b0, c0, iterations, seed, window_ms, hop_ms, ref_channel, prune_threshold, prune_burn_in, beta_tightening, parallel);
        c
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub cells: Vec<BenchCell>,
    pub mixtures: Vec<BenchMixture>,
    /// Explicit seeds; otherwise `0..repetitions`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub repetitions: Option<u64>,
    /// Lets each run use the thread pool internally.
    #[serde(default)]
    pub intra_cell_parallel: bool,
}

/// One algorithm swept over basis counts; an empty list means the
/// algorithm's default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub bases: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMixture {
    pub id: String,
    pub mixture: PathBuf,
    pub references: Vec<PathBuf>,
}

impl BenchSpec {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repetitions.unwrap_or(1)).collect()
        } else {
            self.seeds.clone()
        }
    }
}

pub fn load(path: &Path) -> CliResult<RunConfigFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: RunConfigFile =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::usage(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

/// Input files must exist before any computation starts.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(format!("{}: no such file", path.display())))
    }
}

/// Creates `dir` if needed; fails before any computation when impossible.
pub fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

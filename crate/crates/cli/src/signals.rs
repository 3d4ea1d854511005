use std::path::{Path, PathBuf};

use bnpbss::audio::read_wav;
use bnpbss::separator::stack_sources;
use bnpbss::MultichannelSignal;

use crate::config::require_file;
use crate::error::{CliError, CliResult};

pub fn read(path: &Path) -> CliResult<MultichannelSignal> {
    read_wav(path).map_err(|e| CliError::from_lib(&path.display().to_string(), e))
}

/// Reads every file and stacks all of their channels, in order.
pub fn load_stacked(paths: &[PathBuf]) -> CliResult<MultichannelSignal> {
    let signals = paths.iter().map(|p| read(p)).collect::<CliResult<Vec<_>>>()?;
    stack_sources(&signals).map_err(|e| CliError::usage(format!("cannot stack inputs: {e}")))
}

/// Fails with exit code 3 on the first missing file.
pub fn require_all(paths: &[PathBuf]) -> CliResult<()> {
    paths.iter().try_for_each(|p| require_file(p))
}

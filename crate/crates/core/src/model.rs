//! Shared domain types.
//!
//! Every tensor in the crate uses the axis order (bin, frame, stream):
//! spectrograms are `I x J x M`, per-source variance and power matrices are
//! `I x J`, basis matrices are `I x K` and activation matrices are `K x J`.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-domain samples, `channels x num_samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelSignal {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("signal needs at least one channel"));
        }
        if samples.ncols() == 0 {
            return Err(Error::invalid("signal needs at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(((c, n), _)) = samples.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "signal samples",
                row: c,
                col: n,
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Stacks equally long mono channels.
    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::dims("channels differ in length"));
        }
        let mut samples = Array2::zeros((channels.len(), len));
        for (mut row, ch) in samples.outer_iter_mut().zip(channels) {
            row.iter_mut().zip(ch).for_each(|(d, s)| *d = *s);
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.channels() {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: self.channels(),
            });
        }
        Ok(self.samples.row(c).to_vec())
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}

/// One-sided complex spectrogram, `I bins x J frames x M streams`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array3<Complex64>,
    window_len: usize,
    hop: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(data: Array3<Complex64>, window_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if window_len == 0 || window_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "window length must be even and positive, got {window_len}"
            )));
        }
        let bins = window_len / 2 + 1;
        if data.dim().0 != bins {
            return Err(Error::dims(format!(
                "spectrogram has {} bins, window of {window_len} implies {bins}",
                data.dim().0
            )));
        }
        if let Some(((i, j, _), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "spectrogram",
                row: i,
                col: j,
            });
        }
        Ok(Self {
            data,
            window_len,
            hop,
            sample_rate,
        })
    }

    /// Builds a spectrogram with the same framing as `self` around new data.
    pub fn with_data(&self, data: Array3<Complex64>) -> Result<Self> {
        Self::new(data, self.window_len, self.hop, self.sample_rate)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    pub fn bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn streams(&self) -> usize {
        self.data.dim().2
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// `|data[i, j, stream]|^2` as an `I x J` matrix.
    pub fn power(&self, stream: usize) -> Result<Array2<f64>> {
        power_spectrogram(self, stream)
    }
}

pub fn power_spectrogram(spec: &Spectrogram, stream: usize) -> Result<Array2<f64>> {
    if stream >= spec.streams() {
        return Err(Error::IndexOutOfRange {
            index: stream,
            len: spec.streams(),
        });
    }
    Ok(spec.data.index_axis(Axis(2), stream).mapv(|c| c.norm_sqr()))
}

/// Per-frequency square demixing matrices `W_i`; row `m` is `w_{i,m}^H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixingStack {
    matrices: Vec<DMatrix<Complex64>>,
}

impl DemixingStack {
    pub fn new(matrices: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let m = matrices.first().map_or(0, |w| w.nrows());
        if m == 0 {
            return Err(Error::invalid("demixing stack needs at least one non-empty matrix"));
        }
        for (i, w) in matrices.iter().enumerate() {
            if w.nrows() != m || w.ncols() != m {
                return Err(Error::dims(format!(
                    "W_{i} is {}x{}, expected {m}x{m}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if w.determinant().norm() == 0.0 {
                return Err(Error::Singular(format!("bin {i}")));
            }
        }
        Ok(Self { matrices })
    }

    pub fn identity(bins: usize, streams: usize) -> Self {
        Self {
            matrices: vec![DMatrix::identity(streams, streams); bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn streams(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn matrix(&self, bin: usize) -> &DMatrix<Complex64> {
        &self.matrices[bin]
    }

    pub fn matrices(&self) -> &[DMatrix<Complex64>] {
        &self.matrices
    }

    /// Mutable access for the optimizers; callers keep every `W_i` nonsingular.
    pub(crate) fn matrices_mut(&mut self) -> &mut [DMatrix<Complex64>] {
        &mut self.matrices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(alias = "iva")]
    Auxiva,
    Ilrma,
    #[serde(alias = "vb")]
    VbNonparametric,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Auxiva => "auxiva",
            Algorithm::Ilrma => "ilrma",
            Algorithm::VbNonparametric => "vb",
        }
    }

    pub fn default_bases(self) -> usize {
        match self {
            Algorithm::Ilrma => 5,
            _ => 30,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auxiva" | "iva" => Ok(Algorithm::Auxiva),
            "ilrma" => Ok(Algorithm::Ilrma),
            "vb" | "vb_nonparametric" | "proposed" => Ok(Algorithm::VbNonparametric),
            other => Err(Error::invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// How the Jensen weights `beta` are tightened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaTightening {
    /// `beta ∝ 1 / (E[1/z] E[1/t] E[1/v])`, the minimizer of the bound.
    #[default]
    Minimizer,
    /// `beta ∝ E[1/z] E[1/t] E[1/v]`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub algorithm: Algorithm,
    /// Basis count per source.
    pub bases: usize,
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub iterations: usize,
    pub seed: u64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub ref_channel: usize,
    /// Relative share of `E[z]` below which a basis is switched off.
    pub prune_threshold: f64,
    pub prune_burn_in: usize,
    pub beta_tightening: BetaTightening,
    /// Run per-source and per-bin work on the rayon pool. Results are
    /// identical to the sequential schedule.
    pub parallel: bool,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self::for_algorithm(Algorithm::VbNonparametric)
    }
}

impl SeparationConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let bases = algorithm.default_bases();
        Self {
            algorithm,
            bases,
            a0: 0.1,
            b0: 0.1,
            c0: 1.0 / bases as f64,
            iterations: 100,
            seed: 0,
            window_ms: 512.0,
            hop_ms: 128.0,
            ref_channel: 0,
            prune_threshold: 1e-3,
            prune_burn_in: 10,
            beta_tightening: BetaTightening::Minimizer,
            parallel: false,
        }
    }

    /// Sets the basis count and resets `c0 = 1/K`.
    pub fn with_bases(mut self, bases: usize) -> Self {
        self.bases = bases;
        self.c0 = 1.0 / bases.max(1) as f64;
        self
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.bases == 0 {
            return Err(Error::invalid("bases must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("c0", self.c0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::invalid(format!(
                "prune_threshold must lie in [0, 1), got {}",
                self.prune_threshold
            )));
        }
        if !(self.window_ms > 0.0 && self.hop_ms > 0.0 && self.hop_ms <= self.window_ms) {
            return Err(Error::invalid("need 0 < hop_ms <= window_ms"));
        }
        if self.ref_channel >= channels {
            return Err(Error::IndexOutOfRange {
                index: self.ref_channel,
                len: channels,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Demixing cost after each completed iteration.
    pub cost_trace: Vec<f64>,
    /// Active basis count per source after each completed iteration.
    pub active_bases: Vec<Vec<usize>>,
    pub wall_time: f64,
}

impl Diagnostics {
    pub fn iterations(&self) -> usize {
        self.cost_trace.len()
    }
}

//! WAV input/output (16-bit PCM and 32-bit float) and sample-rate conversion.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, ErrorKind};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WavError};
use crate::model::MultichannelSignal;

const PCM16_SCALE: f64 = 32768.0;
const MAX_CHANNELS: u16 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavMetadata {
    pub channels: u16,
    pub sample_rate: u32,
    pub encoding: WavEncoding,
    /// Samples per channel.
    pub num_samples: usize,
}

fn map_hound(path: &Path, err: hound::Error) -> WavError {
    match err {
        // hound reports short reads as `Other`
        hound::Error::IoError(e) if matches!(e.kind(), ErrorKind::UnexpectedEof | ErrorKind::Other) => {
            WavError::Malformed(format!("file is truncated ({e})"))
        }
        hound::Error::IoError(e) if e.kind() == ErrorKind::NotFound => WavError::NotFound(path.into()),
        hound::Error::IoError(source) => WavError::Io {
            path: path.into(),
            source,
        },
        hound::Error::FormatError(msg) => WavError::Malformed(msg.into()),
        hound::Error::UnfinishedSample => WavError::Malformed("data chunk ends mid-sample".into()),
        other => WavError::Unsupported(other.to_string()),
    }
}

fn open(path: &Path) -> Result<WavReader<BufReader<File>>, WavError> {
    if !path.exists() {
        return Err(WavError::NotFound(path.into()));
    }
    WavReader::open(path).map_err(|e| map_hound(path, e))
}

fn encoding_of(spec: &WavSpec) -> Result<WavEncoding, WavError> {
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => Ok(WavEncoding::Pcm16),
        (SampleFormat::Float, 32) => Ok(WavEncoding::Float32),
        (format, bits) => Err(WavError::Unsupported(format!("{format:?} with {bits} bits per sample"))),
    }
}

pub fn wav_metadata(path: impl AsRef<Path>) -> Result<WavMetadata> {
    let path = path.as_ref();
    let reader = open(path)?;
    let spec = reader.spec();
    Ok(WavMetadata {
        channels: spec.channels,
        sample_rate: spec.sample_rate,
        encoding: encoding_of(&spec)?,
        num_samples: reader.duration() as usize,
    })
}

/// Reads a 16-bit PCM or 32-bit float WAV file. PCM samples are divided by
/// 2^15, so -32768 maps to -1.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelSignal> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let spec = reader.spec();
    let encoding = encoding_of(&spec)?;
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(WavError::Malformed("zero channels".into()).into());
    }
    let interleaved: Vec<f64> = match encoding {
        WavEncoding::Pcm16 => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<Result<_, _>>(),
        WavEncoding::Float32 => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
    }
    .map_err(|e| map_hound(path, e))?;
    if interleaved.len() % channels != 0 {
        return Err(WavError::Malformed("data chunk ends mid-frame".into()).into());
    }
    let len = interleaved.len() / channels;
    if len == 0 {
        return Err(WavError::Empty.into());
    }
    let samples = Array2::from_shape_fn((channels, len), |(c, n)| interleaved[n * channels + c]);
    MultichannelSignal::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, signal: &MultichannelSignal, encoding: WavEncoding) -> Result<()> {
    write_wav_samples(path, signal.samples(), signal.sample_rate(), encoding)
}

/// Writes `channels x samples` data. PCM output is clipped to the
/// representable range.
pub fn write_wav_samples(
    path: impl AsRef<Path>,
    samples: ArrayView2<f64>,
    sample_rate: u32,
    encoding: WavEncoding,
) -> Result<()> {
    let path = path.as_ref();
    if samples.is_empty() {
        return Err(WavError::Empty.into());
    }
    let channels = u16::try_from(samples.nrows())
        .ok()
        .filter(|c| (1..=MAX_CHANNELS).contains(c))
        .ok_or_else(|| WavError::Unsupported(format!("{} channels (1 to {MAX_CHANNELS} allowed)", samples.nrows())))?;
    let spec = WavSpec {
        channels,
        sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let io = |e| match e {
        hound::Error::IoError(source) => WavError::Io {
            path: path.into(),
            source,
        },
        other => map_hound(path, other),
    };
    let mut writer = WavWriter::create(path, spec).map_err(io)?;
    for n in 0..samples.ncols() {
        for c in 0..samples.nrows() {
            let v = samples[[c, n]];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * PCM16_SCALE).round().clamp(-PCM16_SCALE, PCM16_SCALE - 1.0);
                    writer.write_sample(q as i16).map_err(io)?
                }
                WavEncoding::Float32 => writer.write_sample(v as f32).map_err(io)?,
            }
        }
    }
    writer.finalize().map_err(io)?;
    Ok(())
}

/// Zeros per side of the interpolation kernel at the lower of the two rates.
const HALF_TAPS: usize = 32;
/// Passband edge as a fraction of the lower rate.
const CUTOFF: f64 = 0.45;
/// Kaiser shape; about 80 dB stopband attenuation.
const KAISER_BETA: f64 = 8.0;
/// Above this many distinct phases the kernel is evaluated on the fly.
const MAX_TABLE_PHASES: usize = 4096;

fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Kernel {
    /// Cutoff in cycles per input sample.
    fc: f64,
    /// Half support in input samples.
    half: f64,
    norm: f64,
}

impl Kernel {
    fn new(from: u32, to: u32) -> Self {
        let ratio = from as f64 / from.min(to) as f64;
        Self {
            fc: CUTOFF * from.min(to) as f64 / from as f64,
            half: HALF_TAPS as f64 * ratio,
            norm: bessel_i0(KAISER_BETA),
        }
    }

    fn at(&self, x: f64) -> f64 {
        let r = x / self.half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let arg = 2.0 * self.fc * x;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
        2.0 * self.fc * sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm
    }

    /// Taps for output time `base + frac` (in input samples), starting at
    /// input index `base - span + 1`.
    fn taps(&self, frac: f64, span: usize) -> Vec<f64> {
        (0..2 * span).map(|t| self.at(frac + span as f64 - 1.0 - t as f64)).collect()
    }
}

/// Windowed-sinc polyphase resampling with a Kaiser window. Output length is
/// `round(num_samples * target / source)`; the signal is returned unchanged
/// when the rates match.
pub fn resample(signal: &MultichannelSignal, target_rate: u32) -> Result<MultichannelSignal> {
    if target_rate == 0 {
        return Err(crate::error::Error::invalid("target rate must be positive"));
    }
    let from = signal.sample_rate();
    if from == target_rate {
        return Ok(signal.clone());
    }
    let g = gcd(from as u64, target_rate as u64);
    // output n sits at input time n * step / phases
    let (phases, step) = ((target_rate as u64 / g) as usize, from as u64 / g);
    let n_in = signal.num_samples();
    let n_out = ((n_in as f64 * target_rate as f64 / from as f64).round() as usize).max(1);
    let kernel = Kernel::new(from, target_rate);
    let span = kernel.half.ceil() as usize;
    let table: Option<Vec<Vec<f64>>> = (phases <= MAX_TABLE_PHASES)
        .then(|| (0..phases).map(|p| kernel.taps(p as f64 / phases as f64, span)).collect());
    let x = signal.samples();
    let mut out = Array2::zeros((signal.channels(), n_out));
    for n in 0..n_out {
        let pos = n as u64 * step;
        let base = (pos / phases as u64) as i64;
        let phase = (pos % phases as u64) as usize;
        let owned;
        let taps = match &table {
            Some(t) => &t[phase],
            None => {
                owned = kernel.taps(phase as f64 / phases as f64, span);
                &owned
            }
        };
        let first = base - span as i64 + 1;
        let lo = (-first).max(0) as usize;
        let hi = taps.len().min((n_in as i64 - first).max(0) as usize);
        for c in 0..signal.channels() {
            let row = x.row(c);
            let mut acc = 0.0;
            for t in lo..hi {
                acc += taps[t] * row[(first + t as i64) as usize];
            }
            out[[c, n]] = acc;
        }
    }
    MultichannelSignal::new(out, target_rate)
}

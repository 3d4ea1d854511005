//! Synthetic mixtures: instantaneous or convolutive mixing, exponentially
//! decaying noise RIRs, and toy sources with a known NMF rank.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::MultichannelSignal;
use crate::stft::StftPlan;

/// `ln(1000)`: the decay constant that puts the envelope at -60 dB at `T60`.
pub const DECAY_60DB: f64 = 6.907_755_278_982_137;

#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    /// `M x N` real gains.
    Instantaneous(Array2<f64>),
    /// One `M x taps` impulse-response matrix per source.
    Convolutive(Vec<Array2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    /// Mono sources of equal length and rate.
    pub sources: Vec<MultichannelSignal>,
    pub mixing: Mixing,
}

fn source_rows(sources: &[MultichannelSignal]) -> Result<(Vec<Vec<f64>>, u32)> {
    let first = sources.first().ok_or_else(|| Error::invalid("at least one source required"))?;
    let n = first.num_samples();
    let mut rows = Vec::with_capacity(sources.len());
    for (k, s) in sources.iter().enumerate() {
        if s.channels() != 1 {
            return Err(Error::dims(format!("source {k} has {} channels, expected 1", s.channels())));
        }
        if s.num_samples() != n || s.sample_rate() != first.sample_rate() {
            return Err(Error::dims(format!("source {k} differs in length or sample rate")));
        }
        rows.push(s.channel(0)?);
    }
    Ok((rows, first.sample_rate()))
}

/// `x_m = Σ_n h_{m,n} * s_n`, truncated to the source length.
pub fn convolve_mix(spec: &MixSpec) -> Result<MultichannelSignal> {
    let (src, rate) = source_rows(&spec.sources)?;
    let n_src = src.len();
    let len = src[0].len();
    let out = match &spec.mixing {
        Mixing::Instantaneous(a) => {
            if a.ncols() != n_src || a.nrows() == 0 {
                return Err(Error::dims(format!("mixing matrix is {:?} for {n_src} sources", a.dim())));
            }
            Array2::from_shape_fn((a.nrows(), len), |(m, t)| (0..n_src).map(|n| a[[m, n]] * src[n][t]).sum())
        }
        Mixing::Convolutive(rirs) => {
            if rirs.len() != n_src {
                return Err(Error::dims(format!("{} RIR sets for {n_src} sources", rirs.len())));
            }
            let mics = rirs[0].nrows();
            if mics == 0 || rirs.iter().any(|h| h.nrows() != mics || h.ncols() == 0) {
                return Err(Error::dims("every RIR set needs the same, non-zero microphone count"));
            }
            let mut out = Array2::zeros((mics, len));
            for (n, h) in rirs.iter().enumerate() {
                for m in 0..mics {
                    let y = fft_convolve(&src[n], h.row(m).as_slice().expect("contiguous"), len);
                    out.row_mut(m).iter_mut().zip(y).for_each(|(o, v)| *o += v);
                }
            }
            out
        }
    };
    MultichannelSignal::new(out, rate)
}

/// Linear convolution of `x` and `h`, first `out_len` samples.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    (0..out_len)
        .map(|t| if t < full { a[t].re / n as f64 } else { 0.0 })
        .collect()
}

/// Gaussian noise under `exp(-6.9078 t / T60)` with a unit direct-path tap.
/// The noise variance is chosen so that the reverberant tail carries about
/// as much energy as the direct path for long `T60`.
pub fn synth_exponential_rir(t60: f64, taps: usize, seed: u64, sample_rate: u32) -> Result<Vec<f64>> {
    if !(t60 > 0.0 && t60.is_finite()) {
        return Err(Error::invalid(format!("T60 must be positive, got {t60}")));
    }
    if taps == 0 || sample_rate == 0 {
        return Err(Error::invalid("need at least one tap and a positive sample rate"));
    }
    let decay = DECAY_60DB / (t60 * sample_rate as f64);
    let std = (1.0 - (-2.0 * decay).exp()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h: Vec<f64> = (0..taps)
        .map(|t| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z * (-decay * t as f64).exp()
        })
        .collect();
    h[0] = 1.0;
    Ok(h)
}

/// Impulse responses for `mics x sources` with a small per-source
/// inter-microphone delay and independent reverberant tails. Source `n`
/// arrives at microphone `m` after `base + m d_n` samples, with distinct
/// `d_n` in `{-1, 1, -2, 2, ...}`.
pub fn synth_room(t60: f64, taps: usize, mics: usize, sources: usize, seed: u64, sample_rate: u32) -> Result<Vec<Array2<f64>>> {
    if mics == 0 || sources == 0 {
        return Err(Error::invalid("need at least one microphone and one source"));
    }
    let steps: Vec<i64> = (0..sources as i64)
        .map(|n| {
            let mag = n / 2 + 1;
            if n % 2 == 0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    let max_step = steps.iter().map(|d| d.abs()).max().unwrap_or(0);
    let base = (mics as i64 - 1) * max_step;
    let total = taps + 2 * base as usize;
    let mut out = Vec::with_capacity(sources);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &step in &steps {
        let mut h = Array2::zeros((mics, total));
        for m in 0..mics {
            let rir = synth_exponential_rir(t60, taps, rng.random(), sample_rate)?;
            let delay = (base + m as i64 * step) as usize;
            for (t, v) in rir.into_iter().enumerate() {
                h[[m, delay + t]] = v;
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// A source whose power spectrogram is close to `T V` with `T` of rank `rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySourceSpec {
    pub rank: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub window_len: usize,
    pub hop: usize,
    /// Loud tones per basis; no two tones share a slot.
    pub peaks_per_basis: usize,
    /// Standard deviation of the log activations.
    pub activation_spread: f64,
    /// Half-width, in frames, of the smoothing applied to the log activations.
    /// Gains that change a lot within one window smear a tone across bins.
    pub activation_smoothing: usize,
    /// Standard deviation, in radians per hop, of a slow phase random walk
    /// shared by all tones of the source. It keeps independent sources
    /// uncorrelated within each bin.
    pub phase_drift: f64,
    pub seed: u64,
}

impl ToySourceSpec {
    pub fn new(rank: usize, sample_rate: u32, duration_secs: f64, seed: u64) -> Self {
        let window_len = (0.128 * sample_rate as f64).round() as usize & !1;
        Self {
            rank,
            sample_rate,
            duration_secs,
            window_len,
            hop: window_len / 4,
            peaks_per_basis: 6,
            activation_spread: 1.5,
            activation_smoothing: 4,
            phase_drift: 0.1,
            seed,
        }
    }
}

/// Bin spacing between tone slots: at least six bins so Hamming main
/// lobes never overlap, and a multiple of `window_len / hop` so tones differ
/// in frequency by whole turns per hop. Their sidelobes then keep fixed
/// relative phases in the bins between slots and do not beat.
pub fn slot_stride(spec: &ToySourceSpec) -> usize {
    if spec.hop > 0 && spec.window_len % spec.hop == 0 {
        let turn = spec.window_len / spec.hop;
        turn * 6usize.div_ceil(turn)
    } else {
        8
    }
}

/// Relative power of the quiet tones that fill slots without a peak.
const BASIS_FLOOR: f64 = 1e-2;

/// Factors of a toy source. Each slot `q` holds one tone at the fractional
/// bin position `positions[q]`, driven by exactly one basis, so `T` is
/// `slots x rank` with one non-zero per row and `V` is `rank x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFactors {
    pub positions: Vec<f64>,
    pub t: Array2<f64>,
    pub v: Array2<f64>,
}

pub fn toy_factors(spec: &ToySourceSpec, frames: usize) -> Result<ToyFactors> {
    let bins = spec.window_len / 2 + 1;
    // skip DC and the lowest bins, which carry little energy in practice
    let stride = slot_stride(spec);
    let slots = (bins - 1) / stride - 1;
    if spec.rank == 0 || spec.peaks_per_basis == 0 || spec.rank * spec.peaks_per_basis > slots {
        return Err(Error::invalid("rank and peak count must be positive and fit in the spectrum"));
    }
    if !(spec.activation_spread >= 0.0 && spec.activation_spread.is_finite())
        || !(spec.phase_drift >= 0.0 && spec.phase_drift.is_finite())
    {
        return Err(Error::invalid("activation spread and phase drift must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Off-centre tones: the STFT phase of each tone turns from frame to
    // frame, so the coefficients in a bin have zero mean like real audio.
    let offset = rng.random_range(0.5..1.5);
    let positions: Vec<f64> = (1..=slots).map(|q| (q * stride) as f64 + offset).collect();
    let picked = rand::seq::index::sample(&mut rng, slots, spec.rank * spec.peaks_per_basis);
    let mut t = Array2::zeros((slots, spec.rank));
    let mut owned = vec![false; slots];
    for (n, q) in picked.iter().enumerate() {
        t[[q, n / spec.peaks_per_basis]] = rng.random_range(0.5..1.0);
        owned[q] = true;
    }
    for q in (0..slots).filter(|&q| !owned[q]) {
        t[[q, q % spec.rank]] = BASIS_FLOOR;
    }
    let sigma = spec.activation_spread;
    let mut v = Array2::zeros((spec.rank, frames));
    for mut row in v.outer_iter_mut() {
        let z = smooth_noise(&mut rng, frames, spec.activation_smoothing);
        row.iter_mut().zip(z).for_each(|(out, z)| *out = (sigma * z - 0.5 * sigma * sigma).exp());
    }
    Ok(ToyFactors { positions, t, v })
}

/// Unit-variance Gaussian noise smoothed by a raised-cosine kernel of
/// half-width `width`.
fn smooth_noise(rng: &mut ChaCha8Rng, len: usize, width: usize) -> Vec<f64> {
    let kernel: Vec<f64> = (0..=2 * width)
        .map(|n| (PI * (n + 1) as f64 / (2 * width + 2) as f64).sin().powi(2))
        .collect();
    let norm = kernel.iter().map(|c| c * c).sum::<f64>().sqrt();
    let white: Vec<f64> = (0..len + 2 * width).map(|_| StandardNormal.sample(rng)).collect();
    (0..len)
        .map(|j| kernel.iter().zip(&white[j..]).map(|(c, w)| c * w).sum::<f64>() / norm)
        .collect()
}

/// Synthesizes the toy source as a sum of tones, one per slot, each with
/// amplitude `sqrt(T)` times the square root of its basis activation
/// interpolated between frame centres. Peak amplitude is normalized to 0.5.
pub fn synth_nmf_source(spec: &ToySourceSpec) -> Result<MultichannelSignal> {
    if !(spec.duration_secs > 0.0) || spec.sample_rate == 0 {
        return Err(Error::invalid("duration and sample rate must be positive"));
    }
    let plan = StftPlan::new(spec.window_len, spec.hop)?;
    let len = (spec.duration_secs * spec.sample_rate as f64).round() as usize;
    if len < spec.window_len {
        return Err(Error::invalid("duration shorter than one window"));
    }
    let frames = plan.frame_count(len);
    let f = toy_factors(spec, frames)?;
    let centre = |j: usize| (j * spec.hop) as f64 + 0.5 * spec.window_len as f64;
    let interp = |n: usize, at: &dyn Fn(usize) -> f64| {
        let pos = ((n as f64 - centre(0)) / spec.hop as f64).clamp(0.0, (frames - 1) as f64);
        let j = (pos.floor() as usize).min(frames.saturating_sub(2));
        let w = pos - j as f64;
        if frames > 1 { (1.0 - w) * at(j) + w * at(j + 1) } else { at(0) }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    // smoothed steps keep the instantaneous frequency from jumping at hops
    let steps = smooth_noise(&mut rng, frames, spec.activation_smoothing);
    let walk: Vec<f64> = steps
        .iter()
        .scan(0.0, |acc, step| {
            *acc += spec.phase_drift * step;
            Some(*acc)
        })
        .collect();
    let drift: Vec<Complex64> = (0..len).map(|n| Complex64::from_polar(1.0, interp(n, &|j| walk[j]))).collect();
    // complex gain per basis: amplitude envelope times the shared drift
    let gains: Vec<Vec<Complex64>> = f
        .v
        .outer_iter()
        .map(|row| (0..len).map(|n| drift[n] * interp(n, &|j| row[j]).sqrt()).collect())
        .collect();
    let mut out = vec![0.0; len];
    for (q, &pos) in f.positions.iter().enumerate() {
        let (k, tk) = f.t.row(q).iter().enumerate().find(|(_, &x)| x > 0.0).map(|(k, &x)| (k, x)).unwrap();
        let amp = tk.sqrt();
        let omega = 2.0 * PI * pos / spec.window_len as f64;
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let gain = &gains[k];
        // rotate a phasor, resyncing every block to keep rounding drift away
        for start in (0..len).step_by(4096) {
            let mut z = Complex64::from_polar(amp, omega * start as f64 + phase);
            let step = Complex64::from_polar(1.0, omega);
            for n in start..(start + 4096).min(len) {
                out[n] += (gain[n] * z).re;
                z *= step;
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    MultichannelSignal::from_channels(&[out], spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmf::{is_divergence, nmf_is_update, NmfModel};
    use crate::stft::stft;
    use ndarray::{array, Axis};

    fn mono(v: Vec<f64>) -> MultichannelSignal {
        MultichannelSignal::from_channels(&[v], 16_000).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_mixing_stacks_sources() {
        let s = vec![mono(noise(100, 1)), mono(noise(100, 2))];
        let x = convolve_mix(&MixSpec {
            sources: s.clone(),
            mixing: Mixing::Instantaneous(Array2::eye(2)),
        })
        .unwrap();
        for n in 0..2 {
            assert_eq!(x.channel(n).unwrap(), s[n].channel(0).unwrap());
        }
    }

    #[test]
    fn delta_rirs_match_instantaneous() {
        let s = vec![mono(noise(300, 3)), mono(noise(300, 4))];
        let a = array![[0.9, -0.3], [0.4, 1.2]];
        let rirs: Vec<_> = (0..2).map(|n| Array2::from_shape_fn((2, 1), |(m, _)| a[[m, n]])).collect();
        let inst = convolve_mix(&MixSpec {
            sources: s.clone(),
            mixing: Mixing::Instantaneous(a),
        })
        .unwrap();
        let conv = convolve_mix(&MixSpec {
            sources: s,
            mixing: Mixing::Convolutive(rirs),
        })
        .unwrap();
        for (p, q) in inst.samples().iter().zip(conv.samples().iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_delta_shifts() {
        let src = noise(200, 5);
        let mut h = Array2::zeros((1, 8));
        h[[0, 7]] = 1.0;
        let x = convolve_mix(&MixSpec {
            sources: vec![mono(src.clone())],
            mixing: Mixing::Convolutive(vec![h]),
        })
        .unwrap();
        let x = x.channel(0).unwrap();
        assert!(x[..7].iter().all(|v| v.abs() < 1e-12));
        for t in 7..200 {
            assert!((x[t] - src[t - 7]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_is_linear() {
        let a = noise(256, 6);
        let b = noise(256, 7);
        let rirs = synth_room(0.05, 64, 2, 1, 8, 16_000).unwrap();
        let mix = |s: Vec<f64>| {
            convolve_mix(&MixSpec {
                sources: vec![mono(s)],
                mixing: Mixing::Convolutive(rirs.clone()),
            })
            .unwrap()
            .into_samples()
        };
        let combined: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let lhs = mix(combined);
        let rhs = mix(a) * 2.0 - mix(b) * 0.5;
        for (p, q) in lhs.iter().zip(rhs.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_errors() {
        let s = vec![mono(noise(50, 1)), mono(noise(50, 2))];
        let bad = MixSpec {
            sources: s.clone(),
            mixing: Mixing::Instantaneous(Array2::eye(3)),
        };
        assert!(convolve_mix(&bad).is_err());
        let bad = MixSpec {
            sources: s,
            mixing: Mixing::Convolutive(vec![Array2::ones((2, 4))]),
        };
        assert!(convolve_mix(&bad).is_err());
        let stereo = MultichannelSignal::from_channels(&[vec![0.0; 10], vec![0.0; 10]], 16_000).unwrap();
        let bad = MixSpec {
            sources: vec![stereo],
            mixing: Mixing::Instantaneous(Array2::eye(1)),
        };
        assert!(convolve_mix(&bad).is_err());
    }

    #[test]
    fn rir_envelope_and_limits() {
        let fs = 16_000;
        let t60 = 0.3;
        let decay = DECAY_60DB / (t60 * fs as f64);
        let t60_tap = (t60 * fs as f64) as f64;
        assert!(((-decay * t60_tap).exp() - 1e-3).abs() < 1e-12);

        let h = synth_exponential_rir(t60, 8000, 3, fs).unwrap();
        assert_eq!(h[0], 1.0);
        assert_eq!(h, synth_exponential_rir(t60, 8000, 3, fs).unwrap());
        assert_ne!(h, synth_exponential_rir(t60, 8000, 4, fs).unwrap());
        // energy in the window around T60 is ~1e-6 of the energy just after the direct path
        let early: f64 = h[1..201].iter().map(|v| v * v).sum();
        let late: f64 = h[4700..4900].iter().map(|v| v * v).sum();
        assert!(late / early < 1e-5 && late / early > 1e-7, "{}", late / early);

        let short = synth_exponential_rir(1e-4, 64, 1, fs).unwrap();
        let total: f64 = short.iter().map(|v| v * v).sum();
        let tail: f64 = short[11..].iter().map(|v| v * v).sum();
        assert!(tail / total <= 1e-4);
        assert!(synth_exponential_rir(0.0, 10, 0, fs).is_err());
    }

    #[test]
    fn room_delays() {
        let r = synth_room(0.01, 32, 2, 2, 0, 16_000).unwrap();
        let first = |h: &Array2<f64>, m: usize| h.row(m).iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(first(&r[0], 1) as i64 - first(&r[0], 0) as i64, -1);
        assert_eq!(first(&r[1], 1) as i64 - first(&r[1], 0) as i64, 1);
    }

    fn power_of(s: &MultichannelSignal, spec: &ToySourceSpec) -> Array2<f64> {
        let plan = StftPlan::new(spec.window_len, spec.hop).unwrap();
        stft(s, &plan).unwrap().power(0).unwrap()
    }

    fn small_spec(rank: usize, seed: u64) -> ToySourceSpec {
        let mut s = ToySourceSpec::new(rank, 8000, 6.0, seed);
        s.window_len = 1024;
        s.hop = 256;
        s
    }

    #[test]
    fn rank_one_source_is_rank_one() {
        let spec = small_spec(1, 11);
        let s = synth_nmf_source(&spec).unwrap();
        let p = power_of(&s, &spec);
        // rank-0 baseline: the best constant variance
        let mean = p.mean().unwrap();
        let base: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v / mean - (v / mean).ln() - 1.0).sum();
        let mut m = NmfModel::random(p.nrows(), 1, p.ncols(), 0).unwrap();
        for _ in 0..300 {
            nmf_is_update(&mut m, p.view()).unwrap();
        }
        let d = is_divergence(p.view(), &m);
        assert!(d <= 0.05 * base, "{d} vs {base}");
    }

    #[test]
    fn disjoint_sources_barely_correlate() {
        let a = power_of(&synth_nmf_source(&small_spec(2, 1)).unwrap(), &small_spec(2, 1));
        let b = power_of(&synth_nmf_source(&small_spec(8, 2)).unwrap(), &small_spec(8, 2));
        let (a, b) = (a.into_raw_vec_and_offset().0, b.into_raw_vec_and_offset().0);
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() <= 0.2, "{corr}");
    }

    #[test]
    fn toy_source_deterministic() {
        let spec = small_spec(3, 9);
        let a = synth_nmf_source(&spec).unwrap();
        assert_eq!(a, synth_nmf_source(&spec).unwrap());
        assert_ne!(a, synth_nmf_source(&small_spec(3, 10)).unwrap());
        assert!(a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 0.5 + 1e-15);
    }

    #[test]
    fn toy_factors_have_disjoint_peaks() {
        let spec = small_spec(8, 4);
        let f = toy_factors(&spec, 20).unwrap();
        for row in f.t.axis_iter(Axis(0)) {
            assert_eq!(row.iter().filter(|&&x| x > 0.0).count(), 1);
        }
        for col in f.t.axis_iter(Axis(1)) {
            assert_eq!(col.iter().filter(|&&x| x > BASIS_FLOOR).count(), spec.peaks_per_basis);
        }
        for pair in f.positions.windows(2) {
            assert!(pair[1] - pair[0] > 4.0);
        }
        assert!(f.v.iter().all(|&x| x > 0.0));
    }
}

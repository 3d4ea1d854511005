//! Short-time Fourier analysis and synthesis.
//!
//! Analysis uses a periodic Hamming window with `fft_len = window_len`.
//! Synthesis is weighted overlap-add with the same window, normalized by the
//! summed squared window, so `istft(stft(x)) == x` on every sample covered by
//! at least one frame.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::model::{MultichannelSignal, Spectrogram};

#[derive(Clone)]
pub struct StftPlan {
    window: Vec<f64>,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("window_len", &self.window.len())
            .field("hop", &self.hop)
            .finish()
    }
}

/// Periodic (DFT-even) Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

impl StftPlan {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        Self::with_window(hamming(window_len), hop)
    }

    /// Plan with an arbitrary strictly positive analysis window.
    pub fn with_window(window: Vec<f64>, hop: usize) -> Result<Self> {
        let len = window.len();
        if len < 2 || len % 2 != 0 {
            return Err(Error::invalid(format!(
                "window length must be even and at least 2, got {len}"
            )));
        }
        if hop == 0 || hop > len {
            return Err(Error::invalid(format!("hop must lie in 1..={len}, got {hop}")));
        }
        if window.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("window entries must be positive and finite"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            window,
            hop,
        })
    }

    /// Window and hop given in milliseconds; the window is rounded to an even
    /// sample count.
    pub fn from_ms(window_ms: f64, hop_ms: f64, sample_rate: u32) -> Result<Self> {
        let fs = sample_rate as f64;
        let len = 2 * ((window_ms * fs / 1000.0 / 2.0).round() as usize);
        let hop = (hop_ms * fs / 1000.0).round() as usize;
        Self::new(len, hop)
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn fft_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// Frame count for a signal of `num_samples`; the tail is zero-padded so
    /// the last partial frame is kept.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        let len = self.window_len();
        if num_samples < len {
            return 0;
        }
        1 + (num_samples - len).div_ceil(self.hop)
    }
}

pub fn stft(signal: &MultichannelSignal, plan: &StftPlan) -> Result<Spectrogram> {
    let len = plan.window_len();
    let n = signal.num_samples();
    if n < len {
        return Err(Error::invalid(format!(
            "signal of {n} samples is shorter than one window ({len})"
        )));
    }
    let frames = plan.frame_count(n);
    let bins = plan.bins();
    let channels = signal.channels();
    let samples = signal.samples();
    let mut data = Array3::zeros((bins, frames, channels));
    let mut buf = vec![Complex64::default(); len];
    let mut scratch = vec![Complex64::default(); plan.forward.get_inplace_scratch_len()];
    for c in 0..channels {
        let x = samples.row(c);
        for j in 0..frames {
            let start = j * plan.hop;
            for (t, slot) in buf.iter_mut().enumerate() {
                let s = if start + t < n { x[start + t] } else { 0.0 };
                *slot = Complex64::new(s * plan.window[t], 0.0);
            }
            plan.forward.process_with_scratch(&mut buf, &mut scratch);
            for i in 0..bins {
                data[[i, j, c]] = buf[i];
            }
        }
    }
    Spectrogram::new(data, len, plan.hop, signal.sample_rate())
}

pub fn istft(spec: &Spectrogram, plan: &StftPlan, out_len: usize) -> Result<MultichannelSignal> {
    let len = plan.window_len();
    let bins = plan.bins();
    if spec.bins() != bins || spec.window_len() != len || spec.hop() != plan.hop {
        return Err(Error::dims(format!(
            "spectrogram ({} bins, window {}, hop {}) does not match plan (window {len}, hop {})",
            spec.bins(),
            spec.window_len(),
            spec.hop(),
            plan.hop
        )));
    }
    if out_len == 0 {
        return Err(Error::invalid("output length must be positive"));
    }
    let frames = spec.frames();
    let channels = spec.streams();
    let scale = 1.0 / len as f64;

    let mut norm = vec![0.0; out_len];
    for j in 0..frames {
        let start = j * plan.hop;
        for t in 0..len.min(out_len.saturating_sub(start)) {
            norm[start + t] += plan.window[t] * plan.window[t];
        }
    }

    let mut out = Array2::zeros((channels, out_len));
    let mut buf = vec![Complex64::default(); len];
    let mut scratch = vec![Complex64::default(); plan.inverse.get_inplace_scratch_len()];
    for (c, mut y) in out.axis_iter_mut(Axis(0)).enumerate() {
        for j in 0..frames {
            let start = j * plan.hop;
            if start >= out_len {
                break;
            }
            // rebuild the full spectrum by conjugate symmetry
            buf[0] = Complex64::new(spec.data()[[0, j, c]].re, 0.0);
            buf[len / 2] = Complex64::new(spec.data()[[bins - 1, j, c]].re, 0.0);
            for i in 1..bins - 1 {
                let v = spec.data()[[i, j, c]];
                buf[i] = v;
                buf[len - i] = v.conj();
            }
            plan.inverse.process_with_scratch(&mut buf, &mut scratch);
            for t in 0..len.min(out_len - start) {
                y[start + t] += buf[t].re * scale * plan.window[t];
            }
        }
        for (v, &w) in y.iter_mut().zip(&norm) {
            if w > 0.0 {
                *v /= w;
            }
        }
    }
    MultichannelSignal::new(out, spec.sample_rate())
}

//! End-to-end separation: STFT, alternating source-model and demixing
//! updates, projection back onto the reference microphone, inverse STFT.
//!
//! Each iteration first refits every source model to the current separated
//! power, then runs one iterative-projection sweep over all bins with the
//! resulting variances. Frames whose mixture energy is below `1e-10` times
//! the mean are left out of the optimization; the learned `W` is applied to
//! every frame afterwards.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::demix::{cost, demix, ip_sweep, project_back};
use crate::error::{Error, Result};
use crate::model::{Algorithm, DemixingStack, Diagnostics, MultichannelSignal, SeparationConfig, Spectrogram};
use crate::nmf::{nmf_is_update, NmfModel};
use crate::stft::{istft, stft, StftPlan};
use crate::vb::{init_vb_model, VbSourceModel};

/// Relative energy below which a frame is treated as silent.
pub const SILENCE_THRESHOLD: f64 = 1e-10;
const VARIANCE_FLOOR: f64 = 1e-12;

/// Final state of one source's variance model.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceModel {
    /// AuxIVA: time-varying variance shared by all bins.
    Spherical,
    Nmf(NmfModel),
    Vb(VbSourceModel),
}

impl SourceModel {
    pub fn active_bases(&self) -> usize {
        match self {
            SourceModel::Spherical => 0,
            SourceModel::Nmf(m) => m.bases(),
            SourceModel::Vb(m) => m.active_count(),
        }
    }

    fn refit(&mut self, power: &Array2<f64>) -> Result<Array2<f64>> {
        let r = match self {
            SourceModel::Spherical => {
                let per_frame = power.mean_axis(Axis(0)).expect("non-empty");
                per_frame.broadcast(power.dim()).expect("broadcast").to_owned()
            }
            SourceModel::Nmf(m) => {
                nmf_is_update(m, power.view())?;
                m.variance()
            }
            SourceModel::Vb(m) => {
                m.recompute_cm(power.view())?;
                m.sweep(power.view())?;
                return Ok(m.expected_variance());
            }
        };
        Ok(floored(r))
    }
}

fn floored(mut r: Array2<f64>) -> Array2<f64> {
    let floor = (VARIANCE_FLOOR * r.mean().unwrap_or(0.0)).max(f64::MIN_POSITIVE);
    r.mapv_inplace(|v| if v.is_nan() { v } else { v.max(floor) });
    r
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    /// Separated sources as seen at the reference microphone, one per channel.
    pub sources: MultichannelSignal,
    pub demixing: DemixingStack,
    pub models: Vec<SourceModel>,
    pub diagnostics: Diagnostics,
}

impl SeparationResult {
    pub fn cost_trace(&self) -> &[f64] {
        &self.diagnostics.cost_trace
    }
}

/// Per-source seed; distinct streams get decorrelated generators.
fn source_seed(seed: u64, m: usize) -> u64 {
    seed.wrapping_add((m as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Indices of frames whose total energy is at least `1e-10` of the mean.
fn active_frames(x: &Spectrogram) -> Vec<usize> {
    let energy: Vec<f64> = x
        .data()
        .axis_iter(Axis(1))
        .map(|f| f.iter().map(|c| c.norm_sqr()).sum())
        .collect();
    let mean = energy.iter().sum::<f64>() / energy.len() as f64;
    (0..energy.len())
        .filter(|&j| mean > 0.0 && energy[j] >= SILENCE_THRESHOLD * mean)
        .collect()
}

fn powers(y: &Spectrogram) -> Vec<Array2<f64>> {
    (0..y.streams())
        .map(|m| y.data().index_axis(Axis(2), m).mapv(|c| c.norm_sqr()))
        .collect()
}

pub fn separate(mixture: &MultichannelSignal, config: &SeparationConfig) -> Result<SeparationResult> {
    let start = Instant::now();
    let channels = mixture.channels();
    if channels < 2 {
        return Err(Error::invalid("determined separation requires M ≥ 2"));
    }
    config.validate(channels)?;
    let plan = StftPlan::from_ms(config.window_ms, config.hop_ms, mixture.sample_rate())?;
    let x = stft(mixture, &plan)?;

    let keep = active_frames(&x);
    if keep.is_empty() {
        return Err(Error::invalid("mixture is silent"));
    }
    let xa = x.with_data(x.data().select(Axis(1), &keep))?;
    let (bins, frames) = (xa.bins(), xa.frames());

    let mut w = DemixingStack::identity(bins, channels);
    let mut y = xa.clone();
    let mut models = init_models(&y, config, bins, frames)?;

    let mut diagnostics = Diagnostics::default();
    for it in 0..config.iterations {
        let at = |source: Error| Error::AtIteration {
            iteration: it + 1,
            source: Box::new(source),
        };
        let p = powers(&y);
        let refit = |(model, power): (&mut SourceModel, &Array2<f64>)| model.refit(power);
        let r: Vec<Array2<f64>> = if config.parallel {
            models.par_iter_mut().zip(p.par_iter()).map(refit).collect::<Result<_>>()
        } else {
            models.iter_mut().zip(p.iter()).map(refit).collect::<Result<_>>()
        }
        .map_err(at)?;

        ip_sweep(&mut w, &xa, &r, config.parallel).map_err(at)?;
        y = demix(&w, &xa).map_err(at)?;

        if config.algorithm == Algorithm::VbNonparametric && it >= config.prune_burn_in {
            for model in &mut models {
                if let SourceModel::Vb(vb) = model {
                    vb.prune_bases(config.prune_threshold).map_err(at)?;
                }
            }
        }

        let q = cost(&w, &y, &r).map_err(at)?;
        if !q.is_finite() {
            return Err(at(Error::Singular("cost is not finite".into())));
        }
        diagnostics.cost_trace.push(q);
        diagnostics
            .active_bases
            .push(models.iter().map(SourceModel::active_bases).collect());
    }

    let y_full = demix(&w, &x)?;
    let images = project_back(&w, &y_full, config.ref_channel)?;
    let sources = istft(&images, &plan, mixture.num_samples())?;
    diagnostics.wall_time = start.elapsed().as_secs_f64();
    Ok(SeparationResult {
        sources,
        demixing: w,
        models,
        diagnostics,
    })
}

fn init_models(y: &Spectrogram, config: &SeparationConfig, bins: usize, frames: usize) -> Result<Vec<SourceModel>> {
    let p = powers(y);
    (0..y.streams())
        .map(|m| {
            let seed = source_seed(config.seed, m);
            Ok(match config.algorithm {
                Algorithm::Auxiva => SourceModel::Spherical,
                Algorithm::Ilrma => SourceModel::Nmf(NmfModel::random(bins, config.bases, frames, seed)?),
                Algorithm::VbNonparametric => SourceModel::Vb(
                    init_vb_model(p[m].view(), config.bases, config.a0, config.b0, config.c0, seed)?
                        .with_tightening(config.beta_tightening),
                ),
            })
        })
        .collect()
}

/// Stacks mono signals into one multichannel signal.
pub fn stack_sources(sources: &[MultichannelSignal]) -> Result<MultichannelSignal> {
    let first = sources.first().ok_or_else(|| Error::invalid("no sources"))?;
    let n = first.num_samples();
    let mut out = Array2::zeros((0, n));
    for s in sources {
        if s.num_samples() != n || s.sample_rate() != first.sample_rate() {
            return Err(Error::dims("sources differ in length or sample rate"));
        }
        for ch in s.samples().outer_iter() {
            out.push_row(ch).expect("matching length");
        }
    }
    MultichannelSignal::new(out, first.sample_rate())
}

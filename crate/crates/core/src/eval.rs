//! SDR / SIR / SAR with a time-invariant distortion filter.
//!
//! An estimate is split into `s_target` (its projection onto delayed copies
//! of the matching reference), `e_interf` (the further part explained by the
//! other references) and `e_artif` (the rest). Delayed copies are truncated
//! to the signal length, so the three parts add up to the estimate exactly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::MultichannelSignal;

pub const DEFAULT_FILTER_LEN: usize = 512;
/// Scores are clamped to `±SCORE_CAP` dB.
pub const SCORE_CAP: f64 = 250.0;
const RIDGE: f64 = 1e-10;
const MAX_SOURCES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// A Gram matrix was rank deficient and needed the ridge.
    pub regularized: bool,
}

impl Decomposition {
    /// `(sdr, sir, sar)` in dB.
    pub fn scores(&self) -> (f64, f64, f64) {
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let target = energy(&self.s_target);
        let sdr = ratio_db(target, energy(&sum(&self.e_interf, &self.e_artif)));
        let sir = ratio_db(target, energy(&self.e_interf));
        let sar = ratio_db(energy(&sum(&self.s_target, &self.e_interf)), energy(&self.e_artif));
        (sdr, sir, sar)
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    let v = 10.0 * (num / den).log10();
    if v.is_nan() {
        -SCORE_CAP
    } else {
        v.clamp(-SCORE_CAP, SCORE_CAP)
    }
}

/// Per-estimate scores; `permutation[e]` is the reference matched to estimate `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    pub sar: Vec<f64>,
    pub permutation: Vec<usize>,
    pub regularized: bool,
}

impl EvalScores {
    pub fn mean_sdr(&self) -> f64 {
        mean(&self.sdr)
    }
    pub fn mean_sir(&self) -> f64 {
        mean(&self.sir)
    }
    pub fn mean_sar(&self) -> f64 {
        mean(&self.sar)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// FFT helper holding plans for one padded length.
struct Correlator {
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Correlator {
    fn new(len: usize, filter_len: usize) -> Self {
        let n = (len + filter_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.n, Complex64::new(0.0, 0.0));
        self.fwd.process(&mut buf);
        buf
    }

    fn inverse(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / self.n as f64).collect()
    }

    /// `c[d] = Σ_u a[u + d] b[u]` for `d = 0..lags`.
    fn xcorr(&self, fa: &[Complex64], fb: &[Complex64], lags: usize) -> Vec<f64> {
        let prod = fa.iter().zip(fb).map(|(x, y)| x * y.conj()).collect();
        self.inverse(prod)[..lags].to_vec()
    }
}

/// Gram matrix of the truncated delayed copies of `refs` (0..filter_len taps
/// each), ordered `(reference, delay)`.
fn gram(refs: &[&[f64]], spectra: &[Vec<Complex64>], corr: &Correlator, filter_len: usize) -> DMatrix<f64> {
    let len = refs[0].len();
    let n = refs.len() * filter_len;
    let mut g = DMatrix::zeros(n, n);
    for (a, ra) in refs.iter().enumerate() {
        for (b, rb) in refs.iter().enumerate().skip(a) {
            // first row and column of the block from full cross-correlations
            let ab = corr.xcorr(&spectra[a], &spectra[b], filter_len);
            let ba = corr.xcorr(&spectra[b], &spectra[a], filter_len);
            let mut block = DMatrix::zeros(filter_len, filter_len);
            for d in 0..filter_len {
                block[(0, d)] = ab[d];
                block[(d, 0)] = ba[d];
            }
            // <a_{l1+1}, b_{l2+1}> = <a_{l1}, b_{l2}> - a[T-1-l1] b[T-1-l2]
            for l1 in 0..filter_len - 1 {
                for l2 in 0..filter_len - 1 {
                    block[(l1 + 1, l2 + 1)] = block[(l1, l2)] - ra[len - 1 - l1] * rb[len - 1 - l2];
                }
            }
            g.view_mut((a * filter_len, b * filter_len), (filter_len, filter_len))
                .copy_from(&block);
            if a != b {
                g.view_mut((b * filter_len, a * filter_len), (filter_len, filter_len))
                    .copy_from(&block.transpose());
            }
        }
    }
    g
}

/// Solves `G c = rhs`, loading the diagonal once if `G` is not positive definite.
fn solve_spd(g: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(ch) = g.clone().cholesky() {
        let c = ch.solve(rhs);
        if c.iter().all(|v| v.is_finite()) {
            return (c, false);
        }
    }
    let n = g.nrows();
    let load = RIDGE * (g.trace() / n as f64).max(f64::MIN_POSITIVE);
    let loaded = g + DMatrix::identity(n, n) * load;
    let c = match loaded.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => loaded.lu().solve(rhs).unwrap_or_else(|| DVector::zeros(n)),
    };
    (c, true)
}

struct Projector<'a> {
    refs: Vec<&'a [f64]>,
    spectra: Vec<Vec<Complex64>>,
    corr: Correlator,
    filter_len: usize,
    full: DMatrix<f64>,
}

impl<'a> Projector<'a> {
    fn new(refs: Vec<&'a [f64]>, filter_len: usize) -> Self {
        let corr = Correlator::new(refs[0].len(), filter_len);
        let spectra: Vec<_> = refs.iter().map(|r| corr.spectrum(r)).collect();
        let full = gram(&refs, &spectra, &corr, filter_len);
        Self {
            refs,
            spectra,
            corr,
            filter_len,
            full,
        }
    }

    /// Projection of `x` onto the delayed copies of the references in `which`.
    fn project(&self, x: &[f64], fx: &[Complex64], which: &[usize]) -> (Vec<f64>, bool) {
        let l = self.filter_len;
        let idx: Vec<usize> = which.iter().flat_map(|&a| (a * l)..(a * l + l)).collect();
        let g = self.full.select_rows(&idx).select_columns(&idx);
        let mut rhs = DVector::zeros(idx.len());
        for (slot, &a) in which.iter().enumerate() {
            let c = self.corr.xcorr(fx, &self.spectra[a], l);
            rhs.rows_mut(slot * l, l).copy_from_slice(&c);
        }
        let (coef, regularized) = solve_spd(&g, &rhs);
        let mut acc = vec![Complex64::new(0.0, 0.0); self.corr.n];
        for (slot, &a) in which.iter().enumerate() {
            let fc = self.corr.spectrum(coef.rows(slot * l, l).as_slice());
            for ((o, h), s) in acc.iter_mut().zip(&fc).zip(&self.spectra[a]) {
                *o += h * s;
            }
        }
        let mut out = self.corr.inverse(acc);
        out.truncate(x.len());
        (out, regularized)
    }

    fn decompose(&self, x: &[f64], fx: &[Complex64], target: usize) -> Decomposition {
        let all: Vec<usize> = (0..self.refs.len()).collect();
        let (s_target, r1) = self.project(x, fx, &[target]);
        let (p_all, r2) = self.project(x, fx, &all);
        let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
        let e_artif = x.iter().zip(&p_all).map(|(x, p)| x - p).collect();
        Decomposition {
            s_target,
            e_interf,
            e_artif,
            regularized: r1 || r2,
        }
    }
}

fn check_signals(estimates: &[&[f64]], references: &[&[f64]]) -> Result<usize> {
    let len = references.first().map(|r| r.len()).ok_or_else(|| Error::invalid("no references"))?;
    if len == 0 {
        return Err(Error::invalid("empty reference"));
    }
    for (k, s) in estimates.iter().chain(references).enumerate() {
        if s.len() != len {
            return Err(Error::dims(format!("signal {k} has {} samples, expected {len}", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("signal {k} contains non-finite samples")));
        }
    }
    Ok(len)
}

/// Splits `estimate` against `references[target]`.
pub fn decompose(estimate: &[f64], references: &[&[f64]], target: usize, filter_len: usize) -> Result<Decomposition> {
    check_signals(&[estimate], references)?;
    if target >= references.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: references.len(),
        });
    }
    if filter_len == 0 {
        return Err(Error::invalid("filter length must be at least 1"));
    }
    let p = Projector::new(references.to_vec(), filter_len);
    let fx = p.corr.spectrum(estimate);
    Ok(p.decompose(estimate, &fx, target))
}

/// Scores every estimate against every reference and keeps the assignment
/// with the highest mean SIR.
pub fn evaluate(estimates: &[&[f64]], references: &[&[f64]], filter_len: usize) -> Result<EvalScores> {
    let m = references.len();
    if estimates.len() != m {
        return Err(Error::dims(format!("{} estimates for {m} references", estimates.len())));
    }
    if m == 0 || m > MAX_SOURCES {
        return Err(Error::invalid(format!("between 1 and {MAX_SOURCES} sources supported, got {m}")));
    }
    if filter_len == 0 {
        return Err(Error::invalid("filter length must be at least 1"));
    }
    check_signals(estimates, references)?;
    let p = Projector::new(references.to_vec(), filter_len);
    let mut table = vec![vec![(0.0, 0.0, 0.0); m]; m];
    let mut regularized = false;
    for (e, est) in estimates.iter().enumerate() {
        let fx = p.corr.spectrum(est);
        for (r, slot) in table[e].iter_mut().enumerate() {
            let d = p.decompose(est, &fx, r);
            regularized |= d.regularized;
            *slot = d.scores();
        }
    }
    let best = permutations(m)
        .into_iter()
        .max_by(|a, b| {
            let score = |p: &Vec<usize>| p.iter().enumerate().map(|(e, &r)| table[e][r].1).sum::<f64>();
            score(a).total_cmp(&score(b))
        })
        .expect("at least one permutation");
    Ok(EvalScores {
        sdr: best.iter().enumerate().map(|(e, &r)| table[e][r].0).collect(),
        sir: best.iter().enumerate().map(|(e, &r)| table[e][r].1).collect(),
        sar: best.iter().enumerate().map(|(e, &r)| table[e][r].2).collect(),
        permutation: best,
        regularized,
    })
}

/// `evaluate` on the channels of two multichannel signals.
pub fn evaluate_signals(
    estimates: &MultichannelSignal,
    references: &MultichannelSignal,
    filter_len: usize,
) -> Result<EvalScores> {
    let est: Vec<Vec<f64>> = (0..estimates.channels()).map(|c| estimates.channel(c)).collect::<Result<_>>()?;
    let refs: Vec<Vec<f64>> = (0..references.channels()).map(|c| references.channel(c)).collect::<Result<_>>()?;
    let est: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
    let refs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    evaluate(&est, &refs, filter_len)
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

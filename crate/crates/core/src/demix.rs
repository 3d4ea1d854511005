//! Iterative-projection demixing updates shared by all three pipelines.
//!
//! Spectrograms are `(bin, frame, stream)`; per-source variances are passed as
//! one `I x J` matrix per source, in stream order.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DemixingStack, Spectrogram};

/// Diagonal loading used for the single retry on a singular system.
pub const LOADING: f64 = 1e-10;

/// `V_{i,m} = (1/J) Σ_j x_ij x_ij^H / r_m[i, j]`, Hermitian and PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCovariance(DMatrix<Complex64>);

impl WeightedCovariance {
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::dims("weighted covariance must be square and non-empty"));
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    fn trace(&self) -> f64 {
        self.0.diagonal().iter().map(|c| c.re).sum()
    }

    fn loaded(&self) -> Self {
        let m = self.0.nrows();
        let eps = LOADING * self.trace() / m as f64;
        let eps = if eps > 0.0 { eps } else { LOADING };
        Self(&self.0 + DMatrix::<Complex64>::identity(m, m) * Complex64::new(eps, 0.0))
    }
}

fn check_variance(x: &Spectrogram, r: ArrayView2<'_, f64>) -> Result<()> {
    if r.dim() != (x.bins(), x.frames()) {
        return Err(Error::dims(format!(
            "variance is {:?}, spectrogram has ({}, {})",
            r.dim(),
            x.bins(),
            x.frames()
        )));
    }
    Ok(())
}

fn covariance_unchecked(data: &Array3<Complex64>, r: ArrayView2<'_, f64>, bin: usize) -> Result<WeightedCovariance> {
    let (_, frames, m) = data.dim();
    let mut v = DMatrix::<Complex64>::zeros(m, m);
    for j in 0..frames {
        let w = r[[bin, j]];
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!(
                "variance must be positive, got {w} at bin {bin}, frame {j}"
            )));
        }
        let x = data.slice(ndarray::s![bin, j, ..]);
        for a in 0..m {
            let xa = x[a] / w;
            for b in 0..m {
                v[(a, b)] += xa * x[b].conj();
            }
        }
    }
    v /= Complex64::new(frames as f64, 0.0);
    Ok(WeightedCovariance(v))
}

pub fn weighted_covariance(x: &Spectrogram, r: ArrayView2<'_, f64>, bin: usize) -> Result<WeightedCovariance> {
    check_variance(x, r)?;
    if bin >= x.bins() {
        return Err(Error::IndexOutOfRange {
            index: bin,
            len: x.bins(),
        });
    }
    covariance_unchecked(x.data(), r, bin)
}

fn try_ip(w: &DMatrix<Complex64>, v: &WeightedCovariance, m: usize) -> Option<DVector<Complex64>> {
    let wv = w * v.matrix();
    let mut e = DVector::<Complex64>::zeros(w.nrows());
    e[m] = Complex64::new(1.0, 0.0);
    let x = wv.lu().solve(&e)?;
    let quad = (x.adjoint() * v.matrix() * &x)[(0, 0)].re;
    if !(quad > 0.0 && quad.is_finite()) || x.iter().any(|c| !c.is_finite()) {
        return None;
    }
    Some(x / Complex64::new(quad.sqrt(), 0.0))
}

/// New `w_{i,m}`: `(W_i V)^{-1} e_m` normalized to `w^H V w = 1`.
pub fn ip_update(w: &DMatrix<Complex64>, v: &WeightedCovariance, m: usize) -> Result<DVector<Complex64>> {
    if w.nrows() != v.matrix().nrows() || !w.is_square() {
        return Err(Error::dims("demixing matrix and covariance sizes differ"));
    }
    if m >= w.nrows() {
        return Err(Error::IndexOutOfRange {
            index: m,
            len: w.nrows(),
        });
    }
    try_ip(w, v, m)
        .or_else(|| try_ip(w, &v.loaded(), m))
        .ok_or_else(|| Error::Singular(format!("source {m}")))
}

fn sweep_bin(
    w: &mut DMatrix<Complex64>,
    data: &Array3<Complex64>,
    r: &[ArrayView2<'_, f64>],
    bin: usize,
) -> Result<()> {
    for (m, rm) in r.iter().enumerate() {
        let v = covariance_unchecked(data, *rm, bin)?;
        let new = ip_update(w, &v, m).map_err(|e| match e {
            Error::Singular(ctx) => Error::Singular(format!("bin {bin}, {ctx}")),
            other => other,
        })?;
        w.set_row(m, &new.adjoint());
    }
    Ok(())
}

/// One pass over all bins, updating sources in order within each bin.
pub fn ip_sweep(w: &mut DemixingStack, x: &Spectrogram, r: &[Array2<f64>], parallel: bool) -> Result<()> {
    if w.bins() != x.bins() || w.streams() != x.streams() || r.len() != x.streams() {
        return Err(Error::dims(format!(
            "stack {}x{}, spectrogram {} bins x {} streams, {} variances",
            w.bins(),
            w.streams(),
            x.bins(),
            x.streams(),
            r.len()
        )));
    }
    for rm in r {
        check_variance(x, rm.view())?;
    }
    let views: Vec<_> = r.iter().map(|a| a.view()).collect();
    let data = x.data();
    if parallel {
        w.matrices_mut()
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, wi)| sweep_bin(wi, data, &views, i))
    } else {
        w.matrices_mut()
            .iter_mut()
            .enumerate()
            .try_for_each(|(i, wi)| sweep_bin(wi, data, &views, i))
    }
}

fn check_stack(w: &DemixingStack, x: &Spectrogram) -> Result<()> {
    if w.bins() != x.bins() || w.streams() != x.streams() {
        return Err(Error::dims(format!(
            "stack has {} bins x {} streams, spectrogram {} x {}",
            w.bins(),
            w.streams(),
            x.bins(),
            x.streams()
        )));
    }
    Ok(())
}

/// `y_ij = W_i x_ij`.
pub fn demix(w: &DemixingStack, x: &Spectrogram) -> Result<Spectrogram> {
    check_stack(w, x)?;
    let mut y = Array3::<Complex64>::zeros(x.data().dim());
    let m = x.streams();
    for (i, (xi, mut yi)) in x.data().outer_iter().zip(y.outer_iter_mut()).enumerate() {
        let wi = w.matrix(i);
        for (xij, mut yij) in xi.outer_iter().zip(yi.outer_iter_mut()) {
            for a in 0..m {
                yij[a] = (0..m).map(|b| wi[(a, b)] * xij[b]).sum();
            }
        }
    }
    x.with_data(y)
}

/// `Q = -2J Σ_i ln|det W_i| + Σ_{ijm} (ln r + |y|²/r)`; `+inf` if any `W_i` is singular.
pub fn cost(w: &DemixingStack, y: &Spectrogram, r: &[Array2<f64>]) -> Result<f64> {
    check_stack(w, y)?;
    if r.len() != y.streams() {
        return Err(Error::dims("one variance matrix per stream required"));
    }
    let frames = y.frames() as f64;
    let mut q = 0.0;
    for wi in w.matrices() {
        let det = wi.determinant().norm();
        if !(det > 0.0) {
            return Ok(f64::INFINITY);
        }
        q -= 2.0 * frames * det.ln();
    }
    for (m, rm) in r.iter().enumerate() {
        check_variance(y, rm.view())?;
        let ym = y.data().index_axis(Axis(2), m);
        q += ndarray::Zip::from(&ym)
            .and(rm)
            .fold(0.0, |acc, yv, &rv| acc + rv.ln() + yv.norm_sqr() / rv);
    }
    Ok(q)
}

/// Rescales each stream onto microphone `reference`: `[W_i^{-1}]_{ref,m} y_{ij,m}`.
pub fn project_back(w: &DemixingStack, y: &Spectrogram, reference: usize) -> Result<Spectrogram> {
    check_stack(w, y)?;
    if reference >= y.streams() {
        return Err(Error::IndexOutOfRange {
            index: reference,
            len: y.streams(),
        });
    }
    let mut out = y.data().clone();
    for (i, mut oi) in out.outer_iter_mut().enumerate() {
        let a = w
            .matrix(i)
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("bin {i}")))?;
        for mut oij in oi.outer_iter_mut() {
            for (m, v) in oij.iter_mut().enumerate() {
                *v *= a[(reference, m)];
            }
        }
    }
    y.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(bins: usize, frames: usize, m: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((bins, frames, m), || {
            c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        Spectrogram::new(data, 2 * (bins - 1), 1, 16_000).unwrap()
    }

    fn random_stack(bins: usize, m: usize, seed: u64) -> DemixingStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = (0..bins)
            .map(|_| {
                DMatrix::from_fn(m, m, |a, b| {
                    let d = if a == b { 2.0 } else { 0.0 };
                    c(d + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                })
            })
            .collect();
        DemixingStack::new(mats).unwrap()
    }

    fn random_r(bins: usize, frames: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((bins, frames), || rng.random_range(0.1..3.0))
    }

    #[test]
    fn covariance_examples() {
        let data = Array3::from_shape_vec((2, 1, 2), vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        let x = Spectrogram::new(data, 2, 1, 8000).unwrap();
        let v = weighted_covariance(&x, Array2::from_elem((2, 1), 2.0).view(), 0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(v.matrix(), &expect);

        let x = random_spec(5, 40, 2, 1);
        let ones = Array2::ones((5, 40));
        let v1 = weighted_covariance(&x, ones.view(), 3).unwrap();
        let mut sample = DMatrix::<Complex64>::zeros(2, 2);
        for j in 0..40 {
            let xv = DVector::from_iterator(2, (0..2).map(|m| x.data()[[3, j, m]]));
            sample += &xv * xv.adjoint();
        }
        sample /= c(40.0, 0.0);
        assert!((v1.matrix() - &sample).norm() < 1e-14);
        let v3 = weighted_covariance(&x, (&ones * 3.0).view(), 3).unwrap();
        assert!((v3.matrix() * c(3.0, 0.0) - v1.matrix()).norm() < 1e-14);
        // Hermitian
        assert!((v1.matrix() - v1.matrix().adjoint()).norm() < 1e-15);
        assert!(weighted_covariance(&x, Array2::zeros((5, 40)).view(), 0).is_err());
        assert!(weighted_covariance(&x, ones.view(), 5).is_err());
    }

    #[test]
    fn ip_examples() {
        let eye = DMatrix::<Complex64>::identity(2, 2);
        let v = WeightedCovariance::new(eye.clone()).unwrap();
        let w = ip_update(&eye, &v, 1).unwrap();
        assert!((w - DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)])).norm() < 1e-15);

        let v = WeightedCovariance::new(DMatrix::from_diagonal(&DVector::from_vec(vec![c(4.0, 0.0), c(1.0, 0.0)])))
            .unwrap();
        let w = ip_update(&eye, &v, 0).unwrap();
        assert!((w - DVector::from_vec(vec![c(0.5, 0.0), c(0.0, 0.0)])).norm() < 1e-15);
    }

    #[test]
    fn ip_normalizes() {
        let x = random_spec(4, 30, 3, 2);
        let ws = random_stack(4, 3, 3);
        let r = random_r(4, 30, 4);
        for i in 0..4 {
            let v = weighted_covariance(&x, r.view(), i).unwrap();
            for m in 0..3 {
                let w = ip_update(ws.matrix(i), &v, m).unwrap();
                let q = (w.adjoint() * v.matrix() * &w)[(0, 0)];
                assert!((q.re - 1.0).abs() < 1e-10 && q.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_covariance_is_loaded() {
        // rank one V: the retry with diagonal loading succeeds
        let a = DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let v = WeightedCovariance::new(&a * a.adjoint()).unwrap();
        let w = ip_update(&DMatrix::identity(2, 2), &v, 0).unwrap();
        assert!(w.iter().all(|c| c.is_finite()));
        let zero = WeightedCovariance::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(ip_update(&DMatrix::identity(2, 2), &zero, 0).is_ok());
        let singular_w = DMatrix::<Complex64>::zeros(2, 2);
        let v = WeightedCovariance::new(DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(ip_update(&singular_w, &v, 0), Err(Error::Singular(_))));
    }

    #[test]
    fn demix_examples() {
        let x = random_spec(6, 10, 2, 5);
        let y = demix(&DemixingStack::identity(6, 2), &x).unwrap();
        assert_eq!(y.data(), x.data());

        // W = A^{-1} recovers the sources
        let s = random_spec(6, 10, 2, 6);
        let a = random_stack(6, 2, 7);
        let mixed = demix(&a, &s).unwrap();
        let inv = DemixingStack::new(a.matrices().iter().map(|m| m.clone().try_inverse().unwrap()).collect())
            .unwrap();
        let back = demix(&inv, &mixed).unwrap();
        for (p, q) in back.data().iter().zip(s.data().iter()) {
            assert!((p - q).norm() < 1e-10);
        }

        // linearity
        let x2 = random_spec(6, 10, 2, 8);
        let w = random_stack(6, 2, 9);
        let sum = x.with_data(x.data() * c(2.0, 0.0) + x2.data() * c(0.0, -3.0)).unwrap();
        let lhs = demix(&w, &sum).unwrap();
        let rhs = demix(&w, &x).unwrap().data() * c(2.0, 0.0) + demix(&w, &x2).unwrap().data() * c(0.0, -3.0);
        for (p, q) in lhs.data().iter().zip(rhs.iter()) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn cost_plug_in() {
        let y = random_spec(5, 7, 2, 10);
        let w = DemixingStack::identity(5, 2);
        let r: Vec<_> = (0..2).map(|m| y.power(m).unwrap()).collect();
        let q = cost(&w, &y, &r).unwrap();
        let expect: f64 = y.data().iter().map(|v| v.norm_sqr().ln() + 1.0).sum();
        assert!((q - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn cost_row_scaling() {
        let x = random_spec(3, 9, 2, 11);
        let w = random_stack(3, 2, 12);
        let r = vec![random_r(3, 9, 13), random_r(3, 9, 14)];
        let mut mats = w.matrices().to_vec();
        let row = mats[1].row(0) * c(2.0, 0.0);
        mats[1].set_row(0, &row);
        let w2 = DemixingStack::new(mats).unwrap();
        let q1 = cost(&w, &demix(&w, &x).unwrap(), &r).unwrap();
        let y2 = demix(&w2, &x).unwrap();
        let q2 = cost(&w2, &y2, &r).unwrap();
        // only bin 1, stream 0 data change; the log-det term drops by 2J ln 2
        let y1 = demix(&w, &x).unwrap();
        let data_change: f64 = (0..9)
            .map(|j| (y2.data()[[1, j, 0]].norm_sqr() - y1.data()[[1, j, 0]].norm_sqr()) / r[0][[1, j]])
            .sum();
        let expect = -2.0 * 9.0 * 2f64.ln() + data_change;
        assert!(((q2 - q1) - expect).abs() < 1e-10 * q1.abs());
    }

    #[test]
    fn sweep_never_increases_cost() {
        for seed in 0..10 {
            let x = random_spec(4, 50, 2, 100 + seed);
            let r = vec![random_r(4, 50, 200 + seed), random_r(4, 50, 300 + seed)];
            let mut w = random_stack(4, 2, 400 + seed);
            let mut prev = cost(&w, &demix(&w, &x).unwrap(), &r).unwrap();
            for _ in 0..20 {
                ip_sweep(&mut w, &x, &r, false).unwrap();
                let q = cost(&w, &demix(&w, &x).unwrap(), &r).unwrap();
                assert!(q <= prev + 1e-9 * prev.abs(), "seed {seed}: {prev} -> {q}");
                prev = q;
            }
        }
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let x = random_spec(16, 30, 3, 20);
        let r: Vec<_> = (0..3).map(|m| random_r(16, 30, 21 + m)).collect();
        let mut a = DemixingStack::identity(16, 3);
        let mut b = a.clone();
        ip_sweep(&mut a, &x, &r, false).unwrap();
        ip_sweep(&mut b, &x, &r, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_back_properties() {
        let x = random_spec(5, 12, 2, 30);
        let w = random_stack(5, 2, 31);
        let y = demix(&w, &x).unwrap();
        for reference in 0..2 {
            let img = project_back(&w, &y, reference).unwrap();
            for i in 0..5 {
                for j in 0..12 {
                    let s: Complex64 = (0..2).map(|m| img.data()[[i, j, m]]).sum();
                    assert!((s - x.data()[[i, j, reference]]).norm() < 1e-10);
                }
            }
        }
        // with W = I the reference stream passes through and the other
        // stream has no footprint on microphone 0
        let id = project_back(&DemixingStack::identity(5, 2), &y, 0).unwrap();
        assert_eq!(id.data().index_axis(Axis(2), 0), y.data().index_axis(Axis(2), 0));
        assert!(id.data().index_axis(Axis(2), 1).iter().all(|v| v.norm() == 0.0));

        // row rescaling leaves the images unchanged
        let mut mats = w.matrices().to_vec();
        for (i, m) in mats.iter_mut().enumerate() {
            let row = m.row(1) * c(0.3 + i as f64, -1.2);
            m.set_row(1, &row);
        }
        let w2 = DemixingStack::new(mats).unwrap();
        let a = project_back(&w, &y, 0).unwrap();
        let b = project_back(&w2, &demix(&w2, &x).unwrap(), 0).unwrap();
        for (p, q) in a.data().iter().zip(b.data().iter()) {
            assert!((p - q).norm() < 1e-10);
        }
    }
}

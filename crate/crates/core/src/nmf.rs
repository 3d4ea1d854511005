//! Itakura-Saito NMF used as the ILRMA source model.
//!
//! `power (I x J) ≈ T (I x K) · V (K x J)`. The updates are the
//! majorization-minimization rules with the square-root exponent, which
//! never increase the IS divergence.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    t: Array2<f64>,
    v: Array2<f64>,
}

impl NmfModel {
    pub fn new(t: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if t.ncols() != v.nrows() || t.ncols() == 0 {
            return Err(Error::dims(format!(
                "bases {:?} and activations {:?} do not chain",
                t.dim(),
                v.dim()
            )));
        }
        if !t.iter().chain(v.iter()).all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::invalid("NMF factors must be positive and finite"));
        }
        Ok(Self { t, v })
    }

    /// Uniform draws in `[0.1, 1)` for both factors.
    pub fn random(bins: usize, bases: usize, frames: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(0.1..1.0));
        let t = draw(bins, bases);
        let v = draw(bases, frames);
        Self::new(t, v)
    }

    pub fn bases(&self) -> usize {
        self.t.ncols()
    }

    pub fn t(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    /// `T V`, floored at `1e-12`.
    pub fn variance(&self) -> Array2<f64> {
        self.t.dot(&self.v).mapv(|x| x.max(FLOOR))
    }
}

/// `Σ (P/R - ln(P/R) - 1)`; zero-power entries contribute `ln R` minus the
/// corresponding `ln P` limit, so they are skipped.
pub fn is_divergence(power: ArrayView2<'_, f64>, model: &NmfModel) -> f64 {
    let r = model.variance();
    let mut d = 0.0;
    Zip::from(power).and(&r).for_each(|&p, &r| {
        if p > 0.0 {
            let q = p / r;
            d += q - q.ln() - 1.0;
        }
    });
    d
}

/// One sweep: `T` then `V`.
pub fn nmf_is_update(model: &mut NmfModel, power: ArrayView2<'_, f64>) -> Result<()> {
    if power.dim() != (model.t.nrows(), model.v.ncols()) {
        return Err(Error::dims(format!(
            "power is {:?}, model is ({}, {})",
            power.dim(),
            model.t.nrows(),
            model.v.ncols()
        )));
    }
    let ratios = |model: &NmfModel| {
        let r = model.variance();
        let mut num = power.to_owned();
        Zip::from(&mut num).and(&r).for_each(|p, &r| *p /= r * r);
        (num, r.mapv(f64::recip))
    };

    let (num, den) = ratios(model);
    let tn = num.dot(&model.v.t());
    let td = den.dot(&model.v.t());
    Zip::from(&mut model.t)
        .and(&tn)
        .and(&td)
        .for_each(|t, &n, &d| *t = (*t * (n / d).sqrt()).max(FLOOR));

    let (num, den) = ratios(model);
    let vn = model.t.t().dot(&num);
    let vd = model.t.t().dot(&den);
    Zip::from(&mut model.v)
        .and(&vn)
        .and(&vd)
        .for_each(|v, &n, &d| *v = (*v * (n / d).sqrt()).max(FLOOR));
    Ok(())
}

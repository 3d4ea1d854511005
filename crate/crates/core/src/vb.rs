//! Variational source-variance model with per-basis reliability weights.
//!
//! Each source's variance is `r_ij = Σ_k z_k t_ik v_kj` with Gamma priors
//! `t ~ Gamma(a0, a0)`, `v ~ Gamma(b0, b0)`, `z ~ Gamma(c0, c_m)` and a
//! mean-field GIG posterior per entry. The small shape `c0` makes the prior
//! on `z` sparse, so unneeded bases shrink towards zero and can be pruned.
//!
//! Index order: `t` is `I x K`, `v` is `K x J`, `z` has length `K`, and power
//! matrices are `I x J`.
//!
//! The updates minimize the bound
//!
//! ```text
//! Σ_ij [ P_ij Σ_k β_ijk² E[1/z_k] E[1/t_ik] E[1/v_kj]
//!        + ln α_ij + Σ_k E[z_k] E[t_ik] E[v_kj] / α_ij - 1 ]
//!   + Σ KL(q(t) || p(t)) + Σ KL(q(v) || p(v)) + Σ KL(q(z) || p(z))
//! ```
//!
//! with `Σ_k β_ijk = 1`. Every `β_ijk` used here factors as
//! `g_ik h_k u_kj / S_ij`, which turns all updates into matrix products.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::gig::{kl_to_gamma, moments_parts, GigMoments, GigParams};
use crate::model::BetaTightening;

/// Upper limit on inverse moments; reached when `τ -> 0` with shape `<= 1`.
pub const INV_MOMENT_CAP: f64 = 1e12;
/// Lower limit on every moment.
pub const MOMENT_FLOOR: f64 = 1e-12;
/// Relative floor of the expected variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const INIT_SHAPE: f64 = 1000.0;
const INIT_RATE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VbSourceModel {
    pub(crate) a0: f64,
    pub(crate) b0: f64,
    pub(crate) c0: f64,
    pub(crate) c_m: f64,
    pub(crate) rho_t: Array2<f64>,
    pub(crate) tau_t: Array2<f64>,
    pub(crate) rho_v: Array2<f64>,
    pub(crate) tau_v: Array2<f64>,
    pub(crate) rho_z: Array1<f64>,
    pub(crate) tau_z: Array1<f64>,
    pub(crate) et: Array2<f64>,
    pub(crate) et_inv: Array2<f64>,
    pub(crate) ev: Array2<f64>,
    pub(crate) ev_inv: Array2<f64>,
    pub(crate) ez: Array1<f64>,
    pub(crate) ez_inv: Array1<f64>,
    pub(crate) active: Vec<bool>,
    pub(crate) tightening: BetaTightening,
}

/// Tightening constants of the bound: `alpha` (`I x J`) and the Jensen
/// weights `beta_ijk = g_ik h_k u_kj / S_ij`, stored in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundAuxiliaries {
    alpha: Array2<f64>,
    norm: Array2<f64>,
    g: Array2<f64>,
    h: Array1<f64>,
    u: Array2<f64>,
}

impl BoundAuxiliaries {
    pub fn alpha(&self) -> &Array2<f64> {
        &self.alpha
    }

    pub fn beta(&self, i: usize, j: usize, k: usize) -> f64 {
        self.g[[i, k]] * self.h[k] * self.u[[k, j]] / self.norm[[i, j]]
    }

    /// Materialized `I x J x K` weights.
    pub fn beta_tensor(&self) -> Array3<f64> {
        let (bins, frames) = self.alpha.dim();
        Array3::from_shape_fn((bins, frames, self.h.len()), |(i, j, k)| self.beta(i, j, k))
    }
}

/// Prior rate of the reliability weights: `c_m = c0 K / mean(P)`.
pub fn compute_cm(power: ArrayView2<'_, f64>, bases: usize, c0: f64) -> Result<f64> {
    let count = power.len();
    let mean = if count == 0 { 0.0 } else { power.sum() / count as f64 };
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::invalid(format!(
            "mean power must be positive and finite to set the prior rate, got {mean}"
        )));
    }
    Ok(c0 * bases as f64 / mean)
}

/// `(E[θ], E[1/θ])` with the floor/cap applied to divergent or extreme values.
fn bounded_moments(
    shape: f64,
    rho: f64,
    tau: f64,
    what: &'static str,
    row: usize,
    col: usize,
) -> Result<(f64, f64)> {
    let non_finite = || Error::NonFinite { what, row, col };
    if !(rho.is_finite() && tau.is_finite()) || rho <= 0.0 || tau < 0.0 {
        return Err(non_finite());
    }
    let (mean, inv) = moments_parts(&GigParams {
        gamma: shape,
        rho,
        tau,
    });
    let mean = mean.map_err(|_| non_finite())?;
    let inv = inv.unwrap_or(INV_MOMENT_CAP);
    if !mean.is_finite() || inv.is_nan() {
        return Err(non_finite());
    }
    Ok((mean.max(MOMENT_FLOOR), inv.clamp(MOMENT_FLOOR, INV_MOMENT_CAP)))
}

fn check_power(power: ArrayView2<'_, f64>, bins: usize, frames: usize) -> Result<()> {
    if power.dim() != (bins, frames) {
        return Err(Error::dims(format!(
            "power is {:?}, model expects ({bins}, {frames})",
            power.dim()
        )));
    }
    if let Some(((i, j), _)) = power.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::NonFinite {
            what: "power",
            row: i,
            col: j,
        });
    }
    Ok(())
}

/// Draws every `ρ` and `τ` from `Gamma(1000, 1000)`.
pub fn init_vb_model(
    power: ArrayView2<'_, f64>,
    bases: usize,
    a0: f64,
    b0: f64,
    c0: f64,
    seed: u64,
) -> Result<VbSourceModel> {
    if bases == 0 {
        return Err(Error::invalid("need at least one basis"));
    }
    for (name, v) in [("a0", a0), ("b0", b0), ("c0", c0)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    let (bins, frames) = power.dim();
    check_power(power, bins, frames)?;
    let c_m = compute_cm(power, bases, c0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Gamma::new(INIT_SHAPE, 1.0 / INIT_RATE).expect("valid gamma parameters");
    let mut draw2 = |r, c| Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng));
    let rho_t = draw2(bins, bases);
    let tau_t = draw2(bins, bases);
    let rho_v = draw2(bases, frames);
    let tau_v = draw2(bases, frames);
    let rho_z = draw2(1, bases).remove_axis(Axis(0));
    let tau_z = draw2(1, bases).remove_axis(Axis(0));

    let mut model = VbSourceModel {
        a0,
        b0,
        c0,
        c_m,
        et: Array2::zeros((bins, bases)),
        et_inv: Array2::zeros((bins, bases)),
        ev: Array2::zeros((bases, frames)),
        ev_inv: Array2::zeros((bases, frames)),
        ez: Array1::zeros(bases),
        ez_inv: Array1::zeros(bases),
        rho_t,
        tau_t,
        rho_v,
        tau_v,
        rho_z,
        tau_z,
        active: vec![true; bases],
        tightening: BetaTightening::Minimizer,
    };
    model.refresh_all_moments()?;
    Ok(model)
}

impl VbSourceModel {
    pub fn with_tightening(mut self, tightening: BetaTightening) -> Self {
        self.tightening = tightening;
        self
    }

    pub fn bases(&self) -> usize {
        self.active.len()
    }

    pub fn bins(&self) -> usize {
        self.et.nrows()
    }

    pub fn frames(&self) -> usize {
        self.ev.ncols()
    }

    pub fn shapes(&self) -> (f64, f64, f64) {
        (self.a0, self.b0, self.c0)
    }

    pub fn c_m(&self) -> f64 {
        self.c_m
    }

    pub fn set_c_m(&mut self, c_m: f64) -> Result<()> {
        if !(c_m > 0.0 && c_m.is_finite()) {
            return Err(Error::invalid(format!("prior rate must be positive, got {c_m}")));
        }
        self.c_m = c_m;
        Ok(())
    }

    /// Recomputes `c_m` from the current separated power.
    pub fn recompute_cm(&mut self, power: ArrayView2<'_, f64>) -> Result<()> {
        let c_m = compute_cm(power, self.bases(), self.c0)?;
        self.set_c_m(c_m)
    }

    pub fn tightening(&self) -> BetaTightening {
        self.tightening
    }

    pub fn rho_t(&self) -> &Array2<f64> {
        &self.rho_t
    }
    pub fn tau_t(&self) -> &Array2<f64> {
        &self.tau_t
    }
    pub fn rho_v(&self) -> &Array2<f64> {
        &self.rho_v
    }
    pub fn tau_v(&self) -> &Array2<f64> {
        &self.tau_v
    }
    pub fn rho_z(&self) -> &Array1<f64> {
        &self.rho_z
    }
    pub fn tau_z(&self) -> &Array1<f64> {
        &self.tau_z
    }

    /// `E[t]`, `I x K`.
    pub fn et(&self) -> &Array2<f64> {
        &self.et
    }
    pub fn et_inv(&self) -> &Array2<f64> {
        &self.et_inv
    }
    /// `E[v]`, `K x J`.
    pub fn ev(&self) -> &Array2<f64> {
        &self.ev
    }
    pub fn ev_inv(&self) -> &Array2<f64> {
        &self.ev_inv
    }
    /// `E[z]`, length `K`.
    pub fn ez(&self) -> &Array1<f64> {
        &self.ez
    }
    pub fn ez_inv(&self) -> &Array1<f64> {
        &self.ez_inv
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    fn active_mask(&self) -> Array1<f64> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    fn refresh_all_moments(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.bases()).collect();
        self.refresh_t(&all)?;
        self.refresh_v(&all)?;
        self.refresh_z(&all)
    }

    fn refresh_t(&mut self, cols: &[usize]) -> Result<()> {
        for i in 0..self.bins() {
            for &k in cols {
                let (m, inv) =
                    bounded_moments(self.a0, self.rho_t[[i, k]], self.tau_t[[i, k]], "t", i, k)?;
                self.et[[i, k]] = m;
                self.et_inv[[i, k]] = inv;
            }
        }
        Ok(())
    }

    fn refresh_v(&mut self, rows: &[usize]) -> Result<()> {
        for &k in rows {
            for j in 0..self.frames() {
                let (m, inv) =
                    bounded_moments(self.b0, self.rho_v[[k, j]], self.tau_v[[k, j]], "v", k, j)?;
                self.ev[[k, j]] = m;
                self.ev_inv[[k, j]] = inv;
            }
        }
        Ok(())
    }

    fn refresh_z(&mut self, idx: &[usize]) -> Result<()> {
        for &k in idx {
            let (m, inv) = bounded_moments(self.c0, self.rho_z[k], self.tau_z[k], "z", k, 0)?;
            self.ez[k] = m;
            self.ez_inv[k] = inv;
        }
        Ok(())
    }

    fn active_indices(&self) -> Vec<usize> {
        (0..self.bases()).filter(|&k| self.active[k]).collect()
    }

    /// `Σ_active k E[z_k] E[t_ik] E[v_kj]` without flooring.
    fn mean_variance(&self) -> Array2<f64> {
        let ez = &self.ez * &self.active_mask();
        (&self.et * &ez).dot(&self.ev)
    }

    /// Bound-tightening constants for the current moments.
    pub fn compute_auxiliaries(&self) -> BoundAuxiliaries {
        let mask = self.active_mask();
        let (g, h, u) = match self.tightening {
            BetaTightening::Minimizer => (
                self.et_inv.mapv(f64::recip),
                self.ez_inv.mapv(f64::recip) * &mask,
                self.ev_inv.mapv(f64::recip),
            ),
            BetaTightening::Literal => (self.et_inv.clone(), &self.ez_inv * &mask, self.ev_inv.clone()),
        };
        let norm = (&g * &h).dot(&u);
        BoundAuxiliaries {
            alpha: self.mean_variance(),
            norm,
            g,
            h,
            u,
        }
    }

    fn check_aux(&self, aux: &BoundAuxiliaries) -> Result<()> {
        if aux.alpha.dim() != (self.bins(), self.frames()) || aux.h.len() != self.bases() {
            return Err(Error::dims("auxiliaries do not match the model"));
        }
        Ok(())
    }

    /// `P / S²`, the data weight shared by all three `τ` updates.
    fn weighted_power(power: ArrayView2<'_, f64>, aux: &BoundAuxiliaries) -> Array2<f64> {
        let mut w = power.to_owned();
        Zip::from(&mut w).and(&aux.norm).for_each(|p, &s| *p /= s * s);
        w
    }

    pub fn update_t(&mut self, power: ArrayView2<'_, f64>, aux: &BoundAuxiliaries) -> Result<()> {
        check_power(power, self.bins(), self.frames())?;
        self.check_aux(aux)?;
        let inv_alpha = aux.alpha.mapv(f64::recip);
        let rho_sum = inv_alpha.dot(&self.ev.t()); // I x K
        let wp = Self::weighted_power(power, aux);
        let tau_sum = wp.dot(&(&aux.u * &aux.u * &self.ev_inv).t()); // I x K
        let active = self.active_indices();
        for &k in &active {
            let hk = aux.h[k] * aux.h[k] * self.ez_inv[k];
            for i in 0..self.bins() {
                let rho = self.a0 + self.ez[k] * rho_sum[[i, k]];
                let g = aux.g[[i, k]];
                let tau = g * g * hk * tau_sum[[i, k]];
                if !(rho.is_finite() && tau.is_finite()) {
                    return Err(Error::NonFinite { what: "t", row: i, col: k });
                }
                self.rho_t[[i, k]] = rho;
                self.tau_t[[i, k]] = tau;
            }
        }
        self.refresh_t(&active)
    }

    pub fn update_v(&mut self, power: ArrayView2<'_, f64>, aux: &BoundAuxiliaries) -> Result<()> {
        check_power(power, self.bins(), self.frames())?;
        self.check_aux(aux)?;
        let inv_alpha = aux.alpha.mapv(f64::recip);
        let rho_sum = self.et.t().dot(&inv_alpha); // K x J
        let wp = Self::weighted_power(power, aux);
        let tau_sum = (&aux.g * &aux.g * &self.et_inv).t().dot(&wp); // K x J
        let active = self.active_indices();
        for &k in &active {
            let hk = aux.h[k] * aux.h[k] * self.ez_inv[k];
            for j in 0..self.frames() {
                let rho = self.b0 + self.ez[k] * rho_sum[[k, j]];
                let u = aux.u[[k, j]];
                let tau = u * u * hk * tau_sum[[k, j]];
                if !(rho.is_finite() && tau.is_finite()) {
                    return Err(Error::NonFinite { what: "v", row: k, col: j });
                }
                self.rho_v[[k, j]] = rho;
                self.tau_v[[k, j]] = tau;
            }
        }
        self.refresh_v(&active)
    }

    pub fn update_z(&mut self, power: ArrayView2<'_, f64>, aux: &BoundAuxiliaries) -> Result<()> {
        check_power(power, self.bins(), self.frames())?;
        self.check_aux(aux)?;
        let inv_alpha = aux.alpha.mapv(f64::recip);
        let rho_sum = (&self.et * &inv_alpha.dot(&self.ev.t())).sum_axis(Axis(0));
        let wp = Self::weighted_power(power, aux);
        let tau_inner = wp.dot(&(&aux.u * &aux.u * &self.ev_inv).t()); // I x K
        let tau_sum = (&aux.g * &aux.g * &self.et_inv * &tau_inner).sum_axis(Axis(0));
        let active = self.active_indices();
        for &k in &active {
            let rho = self.c_m + rho_sum[k];
            let tau = aux.h[k] * aux.h[k] * tau_sum[k];
            if !(rho.is_finite() && tau.is_finite()) {
                return Err(Error::NonFinite { what: "z", row: k, col: 0 });
            }
            self.rho_z[k] = rho;
            self.tau_z[k] = tau;
        }
        self.refresh_z(&active)
    }

    /// One coordinate sweep over `t`, `v`, `z`, re-tightening before each.
    pub fn sweep(&mut self, power: ArrayView2<'_, f64>) -> Result<()> {
        let aux = self.compute_auxiliaries();
        self.update_t(power, &aux)?;
        let aux = self.compute_auxiliaries();
        self.update_v(power, &aux)?;
        let aux = self.compute_auxiliaries();
        self.update_z(power, &aux)
    }

    /// `r_ij = Σ_active k E[z_k] E[t_ik] E[v_kj]`, floored at `1e-12 * mean(r)`.
    pub fn expected_variance(&self) -> Array2<f64> {
        let mut r = self.mean_variance();
        let floor = VARIANCE_FLOOR * r.mean().unwrap_or(0.0);
        let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE };
        r.mapv_inplace(|v| v.max(floor));
        r
    }

    /// Switches off bases whose share of `Σ_active E[z]` is below `threshold`.
    /// The largest basis always survives. Returns the number pruned.
    pub fn prune_bases(&mut self, threshold: f64) -> Result<usize> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::invalid(format!("threshold must lie in [0, 1), got {threshold}")));
        }
        let total: f64 = self.active_indices().iter().map(|&k| self.ez[k]).sum();
        let keep = self
            .active_indices()
            .into_iter()
            .max_by(|&a, &b| self.ez[a].total_cmp(&self.ez[b]));
        let mut pruned = 0;
        for k in 0..self.bases() {
            if self.active[k] && Some(k) != keep && self.ez[k] / total < threshold {
                self.active[k] = false;
                pruned += 1;
            }
        }
        Ok(pruned)
    }

    /// Value of the bound for the given tightening constants.
    pub fn bound(&self, power: ArrayView2<'_, f64>, aux: &BoundAuxiliaries) -> Result<f64> {
        check_power(power, self.bins(), self.frames())?;
        self.check_aux(aux)?;
        let left = &aux.g * &aux.g * &self.et_inv;
        let mid = &aux.h * &aux.h * &self.ez_inv;
        let right = &aux.u * &aux.u * &self.ev_inv;
        let inv_term = (&left * &mid).dot(&right);
        let mean_r = self.mean_variance();
        let mut data = 0.0;
        Zip::from(power)
            .and(&inv_term)
            .and(&aux.norm)
            .and(&aux.alpha)
            .and(&mean_r)
            .for_each(|&p, &q, &s, &a, &r| {
                data += p * q / (s * s) + a.ln() + r / a - 1.0;
            });
        Ok(data + self.kl_total()?)
    }

    /// The bound at freshly tightened constants.
    pub fn objective(&self, power: ArrayView2<'_, f64>) -> Result<f64> {
        self.bound(power, &self.compute_auxiliaries())
    }

    fn kl_total(&self) -> Result<f64> {
        let kl = |shape: f64, rate: f64, rho: f64, tau: f64, mean: f64, inv: f64| {
            kl_to_gamma(
                &GigParams { gamma: shape, rho, tau },
                rate,
                &GigMoments { mean, inv_mean: inv },
            )
        };
        let mut total = 0.0;
        for k in self.active_indices() {
            for i in 0..self.bins() {
                total += kl(
                    self.a0,
                    self.a0,
                    self.rho_t[[i, k]],
                    self.tau_t[[i, k]],
                    self.et[[i, k]],
                    self.et_inv[[i, k]],
                )?;
            }
            for j in 0..self.frames() {
                total += kl(
                    self.b0,
                    self.b0,
                    self.rho_v[[k, j]],
                    self.tau_v[[k, j]],
                    self.ev[[k, j]],
                    self.ev_inv[[k, j]],
                )?;
            }
            total += kl(self.c0, self.c_m, self.rho_z[k], self.tau_z[k], self.ez[k], self.ez_inv[k])?;
        }
        Ok(total)
    }
}

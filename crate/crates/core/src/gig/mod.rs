//! Generalized inverse Gaussian (GIG) moments.
//!
//! The density is `GIG(θ | γ, ρ, τ) ∝ θ^{γ-1} exp(-ρθ - τ/θ)` with normalizer
//! `2 (τ/ρ)^{γ/2} K_γ(2 sqrt(ρτ))`. Only `E[θ]` and `E[1/θ]` are needed by the
//! variational updates; both are ratios of Bessel functions of neighbouring
//! order and are computed without ever forming `K` itself.

mod bessel;

pub use bessel::{bessel_k_ratio, log_bessel_k, log_bessel_k_scaled};

use crate::error::GigError;

/// Below this value of `2 sqrt(ρτ)` the Gamma (or inverse-Gamma) limit is used.
pub const GAMMA_LIMIT_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub gamma: f64,
    pub rho: f64,
    pub tau: f64,
}

impl GigParams {
    pub fn new(gamma: f64, rho: f64, tau: f64) -> Result<Self, GigError> {
        let p = Self { gamma, rho, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GigError> {
        let Self { gamma, rho, tau } = *self;
        let ok = gamma.is_finite()
            && rho > 0.0
            && rho.is_finite()
            && tau >= 0.0
            && tau.is_finite()
            && (tau > 0.0 || gamma > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GigError::InvalidParams { gamma, rho, tau })
        }
    }

    fn omega(&self) -> f64 {
        2.0 * (self.rho * self.tau).sqrt()
    }

    /// `ln(2 (τ/ρ)^{γ/2} K_γ(2 sqrt(ρτ)))`.
    pub fn log_normalizer(&self) -> Result<f64, GigError> {
        self.validate()?;
        let Self { gamma, rho, tau } = *self;
        let omega = self.omega();
        if omega < GAMMA_LIMIT_THRESHOLD {
            if gamma > 0.0 {
                return Ok(ln_gamma(gamma) - gamma * rho.ln());
            }
            if gamma < 0.0 {
                return Ok(ln_gamma(-gamma) + gamma * tau.ln());
            }
        }
        Ok(std::f64::consts::LN_2 + 0.5 * gamma * (tau.ln() - rho.ln()) + log_bessel_k(gamma, omega)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigMoments {
    /// `E[θ]`
    pub mean: f64,
    /// `E[1/θ]`
    pub inv_mean: f64,
}

/// Both moments, each of which may individually diverge.
pub(crate) fn moments_parts(p: &GigParams) -> (Result<f64, GigError>, Result<f64, GigError>) {
    if let Err(e) = p.validate() {
        return (Err(e.clone()), Err(e));
    }
    let GigParams { gamma, rho, tau } = *p;
    let omega = p.omega();
    let divergent = || Err(GigError::DivergentMoment { gamma });
    if omega < GAMMA_LIMIT_THRESHOLD && gamma != 0.0 {
        return if gamma > 0.0 {
            let inv = if gamma > 1.0 { Ok(rho / (gamma - 1.0)) } else { divergent() };
            (Ok(gamma / rho), inv)
        } else {
            let mean = if gamma < -1.0 { Ok(tau / (-gamma - 1.0)) } else { divergent() };
            (mean, Ok(-gamma / tau))
        };
    }
    // K_{γ+1}/K_γ and K_{γ-1}/K_γ from a single evaluation; the recurrence
    // K_{γ+1} = K_{γ-1} + (2γ/ω) K_γ is only ever used in the direction where
    // both terms are positive.
    let (up, down) = if gamma >= 0.0 {
        let below = bessel::order_pair(gamma - 1.0, omega).1; // K_γ / K_{γ-1}
        (1.0 / below + 2.0 * gamma / omega, 1.0 / below)
    } else {
        let above = bessel::order_pair(gamma, omega).1; // K_{γ+1} / K_γ
        (above, above - 2.0 * gamma / omega)
    };
    let scale = (tau / rho).sqrt();
    (Ok(up * scale), Ok(down / scale))
}

pub fn gig_moments(p: &GigParams) -> Result<GigMoments, GigError> {
    let (mean, inv_mean) = moments_parts(p);
    Ok(GigMoments {
        mean: mean?,
        inv_mean: inv_mean?,
    })
}

/// `KL(GIG(s, ρ, τ) || Gamma(shape s, rate b))` given the moments of the GIG.
///
/// Because the shapes match, the `E[ln θ]` terms cancel.
pub fn kl_to_gamma(p: &GigParams, prior_rate: f64, moments: &GigMoments) -> Result<f64, GigError> {
    let s = p.gamma;
    let inv_term = if p.tau == 0.0 { 0.0 } else { p.tau * moments.inv_mean };
    Ok((prior_rate - p.rho) * moments.mean - inv_term - p.log_normalizer()? - s * prior_rate.ln()
        + ln_gamma(s))
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (k, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

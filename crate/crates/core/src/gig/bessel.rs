//! Modified Bessel function of the second kind, `K_nu(x)`, for real order.
//!
//! The fractional order `mu = nu - round(nu)` is evaluated with Temme's series
//! for `x < 2` and Steed's continued fraction for `x >= 2`; integer steps in
//! order use the recurrence `K_{nu+1} = K_{nu-1} + (2 nu / x) K_nu` on the
//! ratio `K_{nu+1} / K_nu`, which never overflows. Values are carried as
//! `ln(e^x K_nu(x))` so that `x` up to `1e300` is representable.

use std::f64::consts::PI;

use crate::error::GigError;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const SERIES_CUTOFF: f64 = 2.0;

/// Taylor coefficients of `1 / Gamma(1 + z)` about `z = 0`.
const RGAMMA1P: [f64; 28] = [
    1.0,
    0.577_215_664_901_532_860_61,
    -0.655_878_071_520_253_881_08,
    -0.042_002_635_034_095_235_529,
    0.166_538_611_382_291_489_5,
    -0.042_197_734_555_544_336_748,
    -0.009_621_971_527_876_973_562_1,
    0.007_218_943_246_663_099_542_4,
    -0.001_165_167_591_859_065_112_1,
    -0.000_215_241_674_114_950_972_82,
    0.000_128_050_282_388_116_186_15,
    -0.000_020_134_854_780_788_238_656,
    -1.250_493_482_142_670_657_3e-6,
    1.133_027_231_981_695_882_4e-6,
    -2.056_338_416_977_607_103_5e-7,
    6.116_095_104_481_415_817_9e-9,
    5.002_007_644_469_222_930_1e-9,
    -1.181_274_570_487_020_144_6e-9,
    1.043_426_711_691_100_510_5e-10,
    7.782_263_439_905_071_254e-12,
    -3.696_805_618_642_205_708_2e-12,
    5.100_370_287_454_475_979e-13,
    -2.058_326_053_566_506_783_2e-14,
    -5.348_122_539_423_017_982_4e-15,
    1.226_778_628_238_260_790_2e-15,
    -1.181_259_301_697_458_769_5e-16,
    1.186_692_254_751_600_332_6e-18,
    1.412_380_655_318_031_781_6e-18,
];

/// `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))` for `|mu| <= 1/2`, where
/// `gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu)` and
/// `gam2 = (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    let mut even = 0.0;
    let mut odd = 0.0;
    let mut p = 1.0;
    for pair in RGAMMA1P.chunks(2) {
        even += pair[0] * p;
        if let Some(c) = pair.get(1) {
            odd += c * p;
        }
        p *= mu2;
    }
    // g(mu) = even + mu * odd, g(-mu) = even - mu * odd
    let gam1 = -odd;
    let gam2 = even;
    (gam1, gam2, even + mu * odd, even - mu * odd)
}

/// Returns `(ln(e^x K_mu(x)), K_{mu+1}(x) / K_mu(x))` for `|mu| <= 1/2`.
fn fractional_order(mu: f64, x: f64) -> (f64, f64) {
    debug_assert!(mu.abs() <= 0.5 + 1e-12);
    let mu2 = mu * mu;
    if x < SERIES_CUTOFF {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        let k_mu = sum;
        let k_next = sum1 * 2.0 / x;
        (k_mu.ln() + x, k_next / k_mu)
    } else {
        // Steed's algorithm for the continued fraction CF2 with Temme's
        // normalization sum.
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        let log_scaled = 0.5 * (PI / (2.0 * x)).ln() - s.ln();
        (log_scaled, (mu + x + 0.5 - h) / x)
    }
}

/// `(ln(e^x K_nu(x)), K_{nu+1}(x) / K_nu(x))` for any real `nu` and `x > 0`.
pub(crate) fn order_pair(nu: f64, x: f64) -> (f64, f64) {
    if nu < -0.5 {
        // K_nu = K_{-nu};  K_{nu+1}/K_nu = K_{-nu-1}/K_{-nu}
        let (log_k, ratio) = order_pair(-nu - 1.0, x);
        return (log_k + ratio.ln(), 1.0 / ratio);
    }
    let steps = nu.round().max(0.0);
    let mu = nu - steps;
    let (mut log_k, mut ratio) = fractional_order(mu, x);
    for k in 1..=steps as usize {
        log_k += ratio.ln();
        ratio = 1.0 / ratio + 2.0 * (mu + k as f64) / x;
    }
    (log_k, ratio)
}

/// Natural log of `K_order(x)`.
pub fn log_bessel_k(order: f64, x: f64) -> Result<f64, GigError> {
    if !(x > 0.0) || !x.is_finite() || !order.is_finite() {
        return Err(GigError::Domain(x));
    }
    Ok(order_pair(order.abs(), x).0 - x)
}

/// `ln(e^x K_order(x))`; the exponentially scaled form avoids cancellation
/// when differencing orders at large `x`.
pub fn log_bessel_k_scaled(order: f64, x: f64) -> Result<f64, GigError> {
    if !(x > 0.0) || !x.is_finite() || !order.is_finite() {
        return Err(GigError::Domain(x));
    }
    Ok(order_pair(order.abs(), x).0)
}

/// `K_{nu+1}(x) / K_nu(x)`.
pub fn bessel_k_ratio(nu: f64, x: f64) -> Result<f64, GigError> {
    if !(x > 0.0) || !x.is_finite() || !nu.is_finite() {
        return Err(GigError::Domain(x));
    }
    Ok(order_pair(nu, x).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn temme_gammas_at_zero_and_half() {
        let (g1, g2, gp, gm) = temme_gammas(0.0);
        // gam1(0) = -Euler's constant
        assert!((g1 + 0.577_215_664_901_532_9).abs() < 1e-15);
        assert!((g2 - 1.0).abs() < 1e-15);
        assert_eq!(gp, gm);
        let (_, _, gp, gm) = temme_gammas(0.5);
        // 1/Gamma(1.5) = 2/sqrt(pi), 1/Gamma(0.5) = 1/sqrt(pi)
        assert!((gp - 2.0 / PI.sqrt()).abs() < 1e-15);
        assert!((gm - 1.0 / PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn half_order_closed_form() {
        // K_{1/2}(x) = sqrt(pi / (2x)) e^{-x}
        for &x in &[1e-8, 1e-3, 0.5, 1.999, 2.0, 2.0001, 10.0, 700.0, 1e6] {
            let expect = 0.5 * (PI / (2.0 * x)).ln() - x;
            let got = log_bessel_k(0.5, x).unwrap();
            assert!((got - expect).abs() <= 1e-13 * expect.abs().max(1.0), "x={x}");
            // K_{3/2}/K_{1/2} = 1 + 1/x
            assert!(close(bessel_k_ratio(0.5, x).unwrap(), 1.0 + 1.0 / x, 1e-13), "x={x}");
        }
        let v = log_bessel_k(0.5, 2.0).unwrap();
        assert!((v - (0.5 * (PI / 4.0).ln() - 2.0)).abs() < 1e-14);
    }

    #[test]
    fn symmetric_in_order() {
        for &nu in &[0.1, 0.5, 0.9, 1.3, 7.25, 40.0] {
            for &x in &[1e-5, 0.3, 3.0, 80.0] {
                let a = log_bessel_k(nu, x).unwrap();
                let b = log_bessel_k(-nu, x).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn negative_order_ratio_is_consistent() {
        // K_{nu+1}/K_nu for nu < -1/2 via symmetry matches the log difference
        for &nu in &[-0.7, -1.2, -3.6, -10.0] {
            for &x in &[0.01, 1.5, 2.5, 50.0] {
                let r = bessel_k_ratio(nu, x).unwrap();
                let via_logs = (log_bessel_k_scaled(nu + 1.0, x).unwrap()
                    - log_bessel_k_scaled(nu, x).unwrap())
                .exp();
                assert!(close(r, via_logs, 1e-12), "nu={nu} x={x}: {r} vs {via_logs}");
            }
        }
    }

    #[test]
    fn domain_error() {
        assert!(matches!(log_bessel_k(1.0, 0.0), Err(GigError::Domain(_))));
        assert!(log_bessel_k(1.0, -2.0).is_err());
        assert!(log_bessel_k(1.0, f64::NAN).is_err());
    }
}

//! Exact modified Bessel functions of the first kind, used as test oracles.
//!
//! `log_bessel_exact` sums the ascending power series in log space;
//! `bessel_ratio_exact` evaluates the Gauss continued fraction for
//! `I_{v+1}(κ)/I_v(κ)` with the modified Lentz algorithm. The two routes share
//! no code. Both are validated for `0 ≤ v ≤ 300`, `0 < κ ≤ 1e4`; training and
//! scoring never call them.

use crate::error::{Error, Result};

pub const MAX_ORDER: f64 = 300.0;
pub const MAX_KAPPA: f64 = 1e4;

const LENTZ_TINY: f64 = 1e-300;
const LENTZ_EPS: f64 = 1e-16;
const LENTZ_MAX_ITER: usize = 1_000_000;

fn check_range(v: f64, kappa: f64) -> Result<()> {
    if !(0.0..=MAX_ORDER).contains(&v) || !(kappa > 0.0 && kappa <= MAX_KAPPA) {
        return Err(Error::Range(format!(
            "Bessel oracle validated for 0 ≤ v ≤ {MAX_ORDER}, 0 < κ ≤ {MAX_KAPPA}; got v={v}, κ={kappa}"
        )));
    }
    Ok(())
}

/// `ln I_v(κ)` from `Σ_j (κ/2)^{2j+v} / (j! Γ(v+j+1))`.
pub fn log_bessel_exact(v: f64, kappa: f64) -> Result<f64> {
    check_range(v, kappa)?;
    let log_half = (kappa / 2.0).ln();
    let step = 2.0 * log_half;
    let mut log_term = v * log_half - statrs::function::gamma::ln_gamma(v + 1.0);
    // running log-sum-exp: sum = exp(shift) * acc
    let mut shift = log_term;
    let mut acc = 1.0;
    let peak = kappa / 2.0;
    let mut j = 0.0_f64;
    loop {
        j += 1.0;
        log_term += step - j.ln() - (v + j).ln();
        if log_term > shift {
            acc = acc * (shift - log_term).exp() + 1.0;
            shift = log_term;
        } else {
            acc += (log_term - shift).exp();
        }
        if j > peak && log_term < shift + acc.ln() - 40.0 {
            break;
        }
    }
    Ok(shift + acc.ln())
}

/// `I_{v+1}(κ) / I_v(κ)` from the continued fraction
/// `1 / (2(v+1)/κ + 1 / (2(v+2)/κ + …))`.
pub fn bessel_ratio_exact(v: f64, kappa: f64) -> Result<f64> {
    check_range(v, kappa)?;
    let mut f = LENTZ_TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..=LENTZ_MAX_ITER {
        let b = 2.0 * (v + k as f64) / kappa;
        d += b;
        if d == 0.0 {
            d = LENTZ_TINY;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < LENTZ_EPS {
            return Ok(f);
        }
    }
    Err(Error::Range(format!(
        "continued fraction did not converge for v={v}, κ={kappa}"
    )))
}

/// Amos lower bound `κ / (v + 1/2 + sqrt(κ² + (v + 3/2)²))` on the ratio.
pub fn amos_lower(v: f64, kappa: f64) -> f64 {
    kappa / (v + 0.5 + kappa.hypot(v + 1.5))
}

/// Amos upper bound `κ / (v + 1/2 + sqrt(κ² + (v + 1/2)²))` on the ratio.
pub fn amos_upper(v: f64, kappa: f64) -> f64 {
    kappa / (v + 0.5 + kappa.hypot(v + 0.5))
}

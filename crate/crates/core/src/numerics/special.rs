//! Special functions in log scale.
//!
//! Everything downstream multiplies many tiny probabilities, so the incomplete
//! beta function is returned as `ln I_x(a, b)` and never formed in linear
//! scale. With `x = 1e-9` and `a ~ 1e4` the linear value is far below the
//! smallest subnormal, but its logarithm is an ordinary number.

use crate::error::{Error, Result};

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma(x))
}

/// Unchecked `ln Γ(x)`; the caller guarantees `x > 0`.
#[inline]
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    libm::lgamma_r(x).0
}

/// `ln B(a, b)` for `a, b > 0`.
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
        return Err(Error::domain(format!(
            "log_beta requires a, b > 0, got ({a}, {b})"
        )));
    }
    Ok(ln_beta(a, b))
}

#[inline]
pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    if b == 1.0 {
        return -a.ln();
    }
    if a == 1.0 {
        return -b.ln();
    }
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln(e^a + e^b)`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ e^{x_i}`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 - e^x)` for `x <= 0`, accurate on both ends.
#[inline]
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

const SERIES_MAX_TERMS: usize = 2_000;
const CF_MAX_ITER: usize = 20_000;
const TINY: f64 = 1e-300;

/// `ln I_x(a, b)`, the log of the regularized incomplete beta function.
///
/// Three regimes:
/// * small `x` (`x <= 0.1` and `(a+b)x <= (a+1)/2`): the positive-term
///   hypergeometric series `x^a (1-x)^b / (a B(a,b)) · Σ (a+b)_n/(a+1)_n x^n`,
///   whose term ratio is at most 1/2;
/// * `x` below the mean: Lentz's continued fraction with a log-scale prefactor;
/// * `x` above the mean: the reflection `I_x(a,b) = 1 - I_{1-x}(b,a)`.
pub fn log_reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
        return Err(Error::domain(format!(
            "incomplete beta requires a, b > 0, got ({a}, {b})"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain(format!(
            "incomplete beta requires 0 <= x <= 1, got {x}"
        )));
    }
    ln_inc_beta(x, a, b)
}

pub(crate) fn ln_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if x == 1.0 {
        return Ok(0.0);
    }
    if x <= 0.1 && (a + b) * x <= 0.5 * (a + 1.0) {
        return ln_inc_beta_series(x, a, b);
    }
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_inc_beta_cf(x, a, b)
    } else {
        let upper = if 1.0 - x <= 0.1 && (a + b) * (1.0 - x) <= 0.5 * (b + 1.0) {
            ln_inc_beta_series(1.0 - x, b, a)?
        } else {
            ln_inc_beta_cf(1.0 - x, b, a)?
        };
        Ok(log1m_exp(upper))
    }
}

fn ln_prefactor(x: f64, a: f64, b: f64) -> f64 {
    a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b)
}

fn ln_inc_beta_series(x: f64, a: f64, b: f64) -> Result<f64> {
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..SERIES_MAX_TERMS {
        let nf = n as f64;
        term *= (a + b + nf) / (a + 1.0 + nf) * x;
        sum += term;
        if term <= sum * 1e-17 {
            return Ok(ln_prefactor(x, a, b) - a.ln() + sum.ln());
        }
    }
    Err(Error::numeric(
        "incomplete beta series",
        format!("no convergence after {SERIES_MAX_TERMS} terms at x={x}, a={a}, b={b}"),
    ))
}

/// Continued fraction of NR's `betacf`, evaluated by modified Lentz.
fn ln_inc_beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };

    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            return Ok(ln_prefactor(x, a, b) - a.ln() + h.ln());
        }
    }
    Err(Error::numeric(
        "incomplete beta continued fraction",
        format!("no convergence after {CF_MAX_ITER} iterations at x={x}, a={a}, b={b}"),
    ))
}

/// `ln` of the Beta(a, b) density at `x`, for `0 < x < 1`.
#[inline]
pub(crate) fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Solves `ln I_x(a, b) = target` for `x` in `(0, hi]`, where
/// `target <= ln I_hi(a, b)`.
///
/// Safeguarded Newton iteration on `s = ln x`, where the map
/// `s -> ln I_{e^s}(a, b)` is increasing and close to linear (slope `a`)
/// in the left tail.
pub(crate) fn inv_ln_inc_beta(target: f64, a: f64, b: f64, hi: f64) -> Result<f64> {
    let f = |s: f64| -> Result<f64> { Ok(ln_inc_beta(s.exp().min(hi), a, b)? - target) };
    let mut s_hi = hi.ln();
    let mut s_lo = s_hi - 1.0;
    let mut step = 1.0;
    let mut f_lo = f(s_lo)?;
    while f_lo > 0.0 {
        s_hi = s_lo;
        step *= 2.0;
        s_lo -= step;
        if s_lo < -745.0 {
            // Everything below the smallest subnormal: return the floor.
            return Ok(f64::MIN_POSITIVE);
        }
        f_lo = f(s_lo)?;
    }

    let mut s = 0.5 * (s_lo + s_hi);
    for _ in 0..200 {
        let fs = f(s)?;
        if fs == 0.0 {
            return Ok(s.exp().min(hi));
        }
        if fs < 0.0 {
            s_lo = s;
        } else {
            s_hi = s;
        }
        // d/ds ln I = x · pdf(x) / I(x)
        let x = s.exp();
        let slope = (x.ln() + ln_beta_pdf(x, a, b) - (fs + target)).exp();
        let mut next = s - fs / slope;
        if !(next.is_finite() && next > s_lo && next < s_hi) {
            next = 0.5 * (s_lo + s_hi);
        }
        if (next - s).abs() <= 1e-15 * s.abs().max(1.0) || (s_hi - s_lo) <= 1e-15 * s.abs().max(1.0)
        {
            return Ok(next.exp().min(hi));
        }
        s = next;
    }
    Err(Error::numeric(
        "inverse incomplete beta",
        format!("no convergence for target {target}, a={a}, b={b}, hi={hi}"),
    ))
}

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use super::special::{inv_ln_inc_beta, ln_inc_beta};
use super::RandomSource;
use crate::error::{Error, Result};

const REJECTION_MAX_TRIES: usize = 1_000;

/// A Beta(a, b) variate.
pub fn sample_beta(a: f64, b: f64, rng: &mut RandomSource) -> Result<f64> {
    let dist = Beta::new(a, b)
        .map_err(|e| Error::domain(format!("Beta({a}, {b}): {e}")))?;
    Ok(dist.sample(rng))
}

/// A Beta(a, b) variate conditioned on `(0, hi)`.
///
/// `hi = 1` is an ordinary Beta draw. When `hi < 1/2` and
/// `hi · max(b - 1, 0) <= 1` the draw is `x = hi · U^{1/a}`, accepted with
/// probability `(1-x)^{b-1}` (normalized by `(1-hi)^{b-1}` when `b < 1`);
/// the acceptance rate is then at least `e^{-1}` and close to one for tiny
/// `hi`. Everything else inverts the CDF on `U · I_hi(a, b)` in log scale.
pub fn sample_beta_truncated(a: f64, b: f64, hi: f64, rng: &mut RandomSource) -> Result<f64> {
    if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
        return Err(Error::domain(format!(
            "truncated Beta requires a, b > 0, got ({a}, {b})"
        )));
    }
    if !(hi > 0.0 && hi <= 1.0) {
        return Err(Error::domain(format!(
            "truncated Beta requires 0 < hi <= 1, got {hi}"
        )));
    }
    if hi == 1.0 {
        return sample_beta(a, b, rng);
    }
    if hi < 0.5 && hi * (b - 1.0).max(0.0) <= 1.0 {
        let log_cap = if b < 1.0 { (b - 1.0) * (-hi).ln_1p() } else { 0.0 };
        for _ in 0..REJECTION_MAX_TRIES {
            let x = hi * (rng.uniform().ln() / a).exp();
            if rng.uniform().ln() <= (b - 1.0) * (-x).ln_1p() - log_cap {
                return Ok(x);
            }
        }
    }
    let target = ln_inc_beta(hi, a, b)? + rng.uniform().ln();
    inv_ln_inc_beta(target, a, b, hi).map_err(|e| match e {
        Error::Numeric { detail, .. } => Error::numeric(
            "truncated Beta sampler",
            format!("a={a}, b={b}, hi={hi}: {detail}"),
        ),
        other => other,
    })
}

/// A Gamma variate with the given shape and rate.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RandomSource) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::domain(format!("Gamma({shape}, rate {rate}): {e}")))?;
    Ok(dist.sample(rng))
}

/// An inverse-gamma variate with density proportional to
/// `x^{-shape-1} exp(-scale/x)`.
pub fn sample_inv_gamma(shape: f64, scale: f64, rng: &mut RandomSource) -> Result<f64> {
    Ok(1.0 / sample_gamma(shape, scale, rng)?)
}

#[inline]
pub fn sample_std_normal(rng: &mut RandomSource) -> f64 {
    rng.sample(StandardNormal)
}

//! Matching DP and PY hyperparameters to the prior moments of the number of
//! clusters `T` implied by a QB prior.
//!
//! QB moments come from Monte Carlo. DP and PY moments are exact: the DP
//! mean is `Σ_{i<n} α/(α+i)`, and the PY mean and second moment follow the
//! one-point-at-a-time recursion of the Chinese-restaurant construction.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomSource;
use crate::priors::{log_beta_pair, Prior, PyParams, QbParams};

/// Truncation used for Monte-Carlo prior moments.
pub const CALIBRATION_TRUNCATION: usize = 100;
/// Independent random streams used by [`estimate_t_moments_mc`].
const MC_CHUNKS: usize = 64;

/// `E(T) = Σ_{i=0}^{n-1} α/(α+i)` under DP(α).
pub fn dp_expected_t_exact(alpha: f64, n: usize) -> f64 {
    (0..n).map(|i| alpha / (alpha + i as f64)).sum()
}

/// `Var(T) = Σ_{i=0}^{n-1} α i/(α+i)²` under DP(α).
pub fn dp_var_t_exact(alpha: f64, n: usize) -> f64 {
    (0..n).map(|i| alpha * i as f64 / (alpha + i as f64).powi(2)).sum()
}

/// Exact `(E(T), Var(T))` under PY(α, d). Point `i + 1` opens a new block
/// with probability `(α + d K_i)/(α + i)`, which gives
/// `E₁' = E₁ + (α + d E₁)/(α+i)` and
/// `E₂' = E₂ (1 + 2d/(α+i)) + E₁ (2α + d)/(α+i) + α/(α+i)`.
pub fn py_t_moments_exact(alpha: f64, discount: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let (mut e1, mut e2) = (1.0, 1.0);
    for i in 1..n {
        let denom = alpha + i as f64;
        let e1_next = e1 + (alpha + discount * e1) / denom;
        e2 = e2 * (1.0 + 2.0 * discount / denom) + e1 * (2.0 * alpha + discount) / denom + alpha / denom;
        e1 = e1_next;
    }
    (e1, (e2 - e1 * e1).max(0.0))
}

/// `E(T) = (α+d)_n / (d (α+1)_{n-1}) - α/d` under PY(α, d), `d > 0`;
/// the DP sum when `d = 0`.
pub fn py_expected_t_exact(alpha: f64, discount: f64, n: usize) -> f64 {
    use crate::numerics::ln_gamma;
    if discount == 0.0 {
        return dp_expected_t_exact(alpha, n);
    }
    let nf = n as f64;
    let ln_ratio = ln_gamma(alpha + discount + nf) - ln_gamma(alpha + discount) - ln_gamma(alpha + nf)
        + ln_gamma(alpha + 1.0);
    ln_ratio.exp() / discount - alpha / discount
}

/// Monte-Carlo moments of `T` with jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TMoments {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
    pub samples: usize,
}

/// Draws `T` for `n` points from the prior `samples` times.
///
/// Each draw breaks the stick lazily and allocates points with sequential
/// binomials: component `k` receives `N_k ~ Bin(remaining, v_k)`. Work is
/// split into a fixed number of chunks, chunk `j` using stream
/// `rng.stream() * 2^16 + j` of the same seed, so results do not depend on
/// the thread count.
pub fn estimate_t_moments_mc(prior: &Prior, n: usize, samples: usize, rng: &RandomSource) -> Result<TMoments> {
    prior.validate()?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    if samples < 3 {
        return Err(Error::domain("need at least 3 samples for jackknife errors"));
    }
    let base = rng.stream().wrapping_shl(16);
    let histograms: Vec<Vec<u64>> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let count = samples / MC_CHUNKS + usize::from(chunk < samples % MC_CHUNKS);
            let mut local = rng.fork(base.wrapping_add(chunk as u64));
            let mut hist = vec![0u64; n + 1];
            for _ in 0..count {
                hist[draw_t(prior, n, &mut local)] += 1;
            }
            hist
        })
        .collect();
    let mut hist = vec![0u64; n + 1];
    for h in &histograms {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    Ok(moments_from_histogram(&hist))
}

fn draw_t(prior: &Prior, n: usize, rng: &mut RandomSource) -> usize {
    let m = prior.truncation();
    let mut remaining = n as u64;
    let mut t = 0;
    for k in 0..m {
        if remaining == 0 {
            break;
        }
        let taken = if k + 1 == m {
            remaining
        } else {
            let v = match prior {
                Prior::Qb(q) => {
                    let b = if rng.uniform() < q.p { 1.0 } else { q.epsilon };
                    let l1mv = b.ln() + rng.uniform().ln() / q.alpha;
                    -l1mv.exp_m1()
                }
                Prior::Dp(d) => -(rng.uniform().ln() / d.alpha).exp_m1(),
                Prior::Py(y) => {
                    let (a, b) = y.break_shape(k);
                    let (lv, _) = log_beta_pair(a, b, rng);
                    lv.exp()
                }
            };
            let v = v.clamp(0.0, 1.0);
            Binomial::new(remaining, v).expect("probability in [0, 1]").sample(rng)
        };
        if taken > 0 {
            t += 1;
            remaining -= taken;
        }
    }
    t
}

/// Mean and variance of a histogram of `T` values, with jackknife standard
/// errors computed from leave-one-out sums (one term per distinct value).
fn moments_from_histogram(hist: &[u64]) -> TMoments {
    let n: u64 = hist.iter().sum();
    let nf = n as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (t, &c) in hist.iter().enumerate() {
        let (t, c) = (t as f64, c as f64);
        s1 += c * t;
        s2 += c * t * t;
    }
    let mean = s1 / nf;
    let var = ((s2 - s1 * s1 / nf) / (nf - 1.0)).max(0.0);
    // leave-one-out variance when one draw of value t is removed
    let loo_var = |t: f64| {
        let (a, b) = (s1 - t, s2 - t * t);
        ((b - a * a / (nf - 1.0)) / (nf - 2.0)).max(0.0)
    };
    let loo_mean_var: f64 = hist
        .iter()
        .enumerate()
        .map(|(t, &c)| c as f64 * loo_var(t as f64))
        .sum::<f64>()
        / nf;
    let jk_var: f64 = hist
        .iter()
        .enumerate()
        .map(|(t, &c)| c as f64 * (loo_var(t as f64) - loo_mean_var).powi(2))
        .sum::<f64>();
    TMoments {
        mean,
        var,
        se_mean: (var / nf).sqrt(),
        se_var: ((nf - 1.0) / nf * jk_var).sqrt(),
        samples: n as usize,
    }
}

/// The DP concentration whose exact `E(T)` at sample size `n` equals
/// `target_mean`, by bisection to `|E(T) - target| <= 1e-6`.
pub fn calibrate_dp(target_mean: f64, n: usize) -> Result<f64> {
    if !(target_mean > 1.0 && target_mean < n as f64) {
        return Err(Error::domain(format!(
            "DP calibration target {target_mean} must lie in (1, {n})"
        )));
    }
    let (mut lo, mut hi) = (1e-12, 1.0);
    while dp_expected_t_exact(hi, n) < target_mean {
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::numeric("calibrate_dp", "failed to bracket the target"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let value = dp_expected_t_exact(mid, n);
        if (value - target_mean).abs() <= 1e-9 {
            return Ok(mid);
        }
        if value < target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    if (dp_expected_t_exact(mid, n) - target_mean).abs() <= 1e-6 {
        Ok(mid)
    } else {
        Err(Error::numeric("calibrate_dp", "bisection did not reach tolerance"))
    }
}

/// Result of a PY moment fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyFit {
    pub alpha: f64,
    pub discount: f64,
    /// Exact moments at the fitted point.
    pub mean: f64,
    pub var: f64,
    /// Relative squared moment mismatch at the fitted point.
    pub objective: f64,
    pub converged: bool,
}

/// Search box for the PY fit: `d ∈ [0, 0.5]`, `α ∈ [-d + 0.01, 5]`.
const PY_D_MAX: f64 = 0.5;
const PY_ALPHA_MAX: f64 = 5.0;
const PY_ALPHA_MARGIN: f64 = 0.01;

fn clamp_py(x: [f64; 2]) -> [f64; 2] {
    let d = x[1].clamp(0.0, PY_D_MAX);
    let alpha = x[0].clamp(-d + PY_ALPHA_MARGIN, PY_ALPHA_MAX);
    [alpha, d]
}

/// Fits `(α, d)` so that the exact PY mean and variance of `T` match the
/// targets, minimizing the relative squared mismatch with a Nelder–Mead
/// simplex (three restarts) over the search box. `seed` gives the starting
/// point; `None` starts from the DP fit of the mean with `d = 0.05`.
pub fn calibrate_py(target_mean: f64, target_var: f64, n: usize, seed: Option<(f64, f64)>) -> Result<PyFit> {
    if !(target_mean > 1.0 && target_mean < n as f64) || !(target_var > 0.0) {
        return Err(Error::domain(format!(
            "PY calibration targets (mean {target_mean}, var {target_var}) are infeasible for n = {n}"
        )));
    }
    let objective = |x: [f64; 2]| {
        let c = clamp_py(x);
        let (m, v) = py_t_moments_exact(c[0], c[1], n);
        let penalty = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
        ((m - target_mean) / target_mean).powi(2) + ((v - target_var) / target_var).powi(2) + penalty
    };
    let start = match seed {
        Some((a, d)) => [a, d],
        None => [calibrate_dp(target_mean, n)?, 0.05],
    };
    let mut best = clamp_py(start);
    let mut best_value = objective(best);
    for _ in 0..3 {
        let (x, value) = nelder_mead(&objective, best, [0.1, 0.02], 1e-16, 2000);
        let x = clamp_py(x);
        if value <= best_value {
            best = x;
            best_value = objective(x);
        }
    }
    let (mean, var) = py_t_moments_exact(best[0], best[1], n);
    Ok(PyFit {
        alpha: best[0],
        discount: best[1],
        mean,
        var,
        objective: best_value,
        converged: best_value < 1e-8,
    })
}

/// Minimal 2-D Nelder–Mead with standard coefficients.
fn nelder_mead(f: &impl Fn([f64; 2]) -> f64, start: [f64; 2], step: [f64; 2], ftol: f64, max_iter: usize) -> ([f64; 2], f64) {
    let mut simplex = [start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]];
    let mut values = simplex.map(f);
    for _ in 0..max_iter {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        if (values[2] - values[0]).abs() <= ftol {
            break;
        }
        let centroid = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let reflected = along(-1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] { along(-0.5) } else { along(0.5) };
            let fc = f(contracted);
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best], values[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpFit {
    pub alpha: f64,
    pub mean: f64,
}

/// One row of the calibration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub qb: QbParams,
    pub qb_moments: TMoments,
    pub dp: DpFit,
    pub py: PyFit,
    /// Monte-Carlo moments of the fitted PY prior, same sample count.
    pub py_moments: TMoments,
    pub samples: usize,
}

/// Estimates the QB moments of `T` at sample size `n` and fits DP and PY to
/// them. `qb.truncation` is used as given.
pub fn calibrate(qb: &QbParams, n: usize, samples: usize, rng: &RandomSource) -> Result<CalibrationReport> {
    let qb_moments = estimate_t_moments_mc(&Prior::Qb(*qb), n, samples, rng)?;
    let dp_alpha = calibrate_dp(qb_moments.mean, n)?;
    let py = calibrate_py(qb_moments.mean, qb_moments.var, n, None)?;
    let py_prior = Prior::Py(PyParams::new(py.alpha, py.discount, qb.truncation)?);
    let py_moments = estimate_t_moments_mc(&py_prior, n, samples, &rng.fork(rng.stream().wrapping_add(1)))?;
    Ok(CalibrationReport {
        n,
        qb: *qb,
        qb_moments,
        dp: DpFit {
            alpha: dp_alpha,
            mean: dp_expected_t_exact(dp_alpha, n),
        },
        py,
        py_moments,
        samples,
    })
}

/// Writes reports as CSV, one row per sample size.
pub fn write_calibration_csv<W: std::io::Write>(reports: &[CalibrationReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = Error::write;
    w.write_record([
        "n", "qb_mean", "qb_var", "qb_se_mean", "qb_se_var", "dp_alpha", "dp_mean", "py_alpha", "py_discount",
        "py_mean", "py_var", "samples",
    ])
    .map_err(to_err)?;
    for r in reports {
        w.write_record([
            r.n.to_string(),
            format!("{:.4}", r.qb_moments.mean),
            format!("{:.4}", r.qb_moments.var),
            format!("{:.4}", r.qb_moments.se_mean),
            format!("{:.4}", r.qb_moments.se_var),
            format!("{:.4}", r.dp.alpha),
            format!("{:.4}", r.dp.mean),
            format!("{:.4}", r.py.alpha),
            format!("{:.4}", r.py.discount),
            format!("{:.4}", r.py.mean),
            format!("{:.4}", r.py.var),
            r.samples.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(Error::write)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::DpParams;

    #[test]
    fn dp_mean_basics() {
        assert_eq!(dp_expected_t_exact(3.7, 1), 1.0);
        let grid: Vec<f64> = (1..60).map(|i| dp_expected_t_exact(0.05 * i as f64, 40)).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
        assert!((dp_expected_t_exact(1e9, 40) - 40.0).abs() < 1e-5);
    }

    #[test]
    fn py_recursion_matches_closed_mean_and_dp() {
        for (a, d, n) in [(0.5, 0.3, 50), (0.29, 0.1, 2500), (-0.05, 0.2, 200), (2.0, 0.0, 100)] {
            let (m, _) = py_t_moments_exact(a, d, n);
            assert!((m - py_expected_t_exact(a, d, n)).abs() < 1e-9 * m, "({a},{d},{n})");
        }
        let (m, v) = py_t_moments_exact(0.7, 0.0, 300);
        assert!((m - dp_expected_t_exact(0.7, 300)).abs() < 1e-12);
        assert!((v - dp_var_t_exact(0.7, 300)).abs() < 1e-10);
    }

    #[test]
    fn py_variance_matches_enumeration() {
        use crate::eppf::{log_eppf_py, size_profiles};
        let (a, d, n) = (0.4, 0.25, 7);
        let (mut m1, mut m2) = (0.0, 0.0);
        for (part, count) in size_profiles(n) {
            let p = count * log_eppf_py(&part, a, d).unwrap().exp();
            m1 += p * part.t() as f64;
            m2 += p * (part.t() * part.t()) as f64;
        }
        let (m, v) = py_t_moments_exact(a, d, n);
        assert!((m - m1).abs() < 1e-12);
        assert!((v - (m2 - m1 * m1)).abs() < 1e-12);
    }

    #[test]
    fn mc_single_point() {
        let rng = RandomSource::new(40, 0);
        let prior = Prior::Qb(QbParams::new(0.9, 1.0, 0.01, 100).unwrap());
        let m = estimate_t_moments_mc(&prior, 1, 1000, &rng).unwrap();
        assert_eq!((m.mean, m.var), (1.0, 0.0));
    }

    #[test]
    fn mc_dp_matches_exact() {
        let rng = RandomSource::new(41, 0);
        let prior = Prior::Dp(DpParams::new(0.71, 100).unwrap());
        let m = estimate_t_moments_mc(&prior, 50, 100_000, &rng).unwrap();
        let exact = dp_expected_t_exact(0.71, 50);
        assert!((m.mean - exact).abs() < 3.0 * m.se_mean, "{m:?} vs {exact}");
        let exact_var = dp_var_t_exact(0.71, 50);
        assert!((m.var - exact_var).abs() < 3.0 * m.se_var, "{m:?} vs {exact_var}");
    }

    #[test]
    fn mc_is_deterministic() {
        let rng = RandomSource::new(42, 3);
        let prior = Prior::Qb(QbParams::new(0.9, 1.0, 1e-3, 100).unwrap());
        let a = estimate_t_moments_mc(&prior, 30, 5000, &rng).unwrap();
        let b = estimate_t_moments_mc(&prior, 30, 5000, &rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jackknife_matches_direct_leave_one_out() {
        let hist = [0u64, 3, 5, 2, 1];
        let values: Vec<f64> = hist
            .iter()
            .enumerate()
            .flat_map(|(t, &c)| std::iter::repeat_n(t as f64, c as usize))
            .collect();
        let n = values.len() as f64;
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
        };
        let loo: Vec<f64> = (0..values.len())
            .map(|i| {
                let mut v = values.clone();
                v.remove(i);
                var(&v)
            })
            .collect();
        let lm = loo.iter().sum::<f64>() / n;
        let se = ((n - 1.0) / n * loo.iter().map(|x| (x - lm).powi(2)).sum::<f64>()).sqrt();
        let m = moments_from_histogram(&hist);
        assert!((m.var - var(&values)).abs() < 1e-12);
        assert!((m.se_var - se).abs() < 1e-12);
    }

    #[test]
    fn dp_round_trip() {
        for a in [0.3, 0.7, 1.5] {
            for n in [50, 100, 2500] {
                let got = calibrate_dp(dp_expected_t_exact(a, n), n).unwrap();
                assert!((got - a).abs() < 1e-6, "{a}, {n}: {got}");
            }
        }
        assert!(calibrate_dp(1.0, 50).is_err());
        assert!(calibrate_dp(50.0, 50).is_err());
    }

    #[test]
    fn py_fit_recovers_known_parameters() {
        let (m, v) = py_t_moments_exact(0.39, 0.1, 200);
        let fit = calibrate_py(m, v, 200, None).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!((fit.alpha - 0.39).abs() < 1e-3 && (fit.discount - 0.1).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn py_fit_on_dp_slice() {
        let n = 200;
        let (m, v) = (dp_expected_t_exact(0.8, n), dp_var_t_exact(0.8, n));
        let fit = calibrate_py(m, v, n, Some((0.8, 0.0))).unwrap();
        assert!(fit.discount < 1e-3, "{fit:?}");
        assert!((fit.alpha - 0.8).abs() < 1e-2, "{fit:?}");
    }

    #[test]
    fn csv_shape() {
        let rng = RandomSource::new(43, 0);
        let qb = QbParams::with_sample_size_epsilon(0.9, 1.0, 50, 100).unwrap();
        let report = calibrate(&qb, 50, 4000, &rng).unwrap();
        let mut buf = Vec::new();
        write_calibration_csv(&[report], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("n,qb_mean,qb_var"));
        assert!(lines.next().unwrap().starts_with("50,"));
    }
}

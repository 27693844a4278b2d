//! Stick-breaking priors on mixture weights.
//!
//! Weights are kept in log scale throughout. Under the QB prior the stick
//! left over after an `ε` break is at most `ε` times what came before, so a
//! few such breaks take linear-scale weights below the smallest double.
//! [`StickState`] stores `ln w_k` and derives the remaining-stick masses
//! `R_k = Σ_{l>k} w_l` from it by suffix log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log1m_exp, log_add_exp, ln_beta, RandomSource};

pub const DEFAULT_TRUNCATION: usize = 50;

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

/// Quasi-Bernoulli stick-breaking parameters.
///
/// `epsilon = 0` is the geometric-truncation limit and `epsilon = 1` gives
/// back the Dirichlet process with the same `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QbParams {
    pub p: f64,
    pub alpha: f64,
    pub epsilon: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

impl QbParams {
    pub fn new(p: f64, alpha: f64, epsilon: f64, truncation: usize) -> Result<Self> {
        let params = Self {
            p,
            alpha,
            epsilon,
            truncation,
        };
        params.validate()?;
        Ok(params)
    }

    /// The `ε = n^{-2.1}` schedule used for a sample of size `n`.
    pub fn with_sample_size_epsilon(p: f64, alpha: f64, n: usize, truncation: usize) -> Result<Self> {
        Self::new(p, alpha, (n as f64).powf(-2.1), truncation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::domain(format!("QB p must lie in (0, 1), got {}", self.p)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::domain(format!("QB alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::domain(format!(
                "QB epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        check_truncation(self.truncation)
    }

    /// The integer `r` with `max(α - 1, 0) <= r < α`; posterior consistency
    /// needs `ε = o(n^{-(2 + r)})`.
    pub fn consistency_rate_r(&self) -> u32 {
        (self.alpha.ceil() - 1.0).max(0.0) as u32
    }

    /// `ln f_V` at `ln(1 - v) = log_u`.
    pub(crate) fn ln_break_density(&self, log_u: f64) -> f64 {
        let ln_alpha = self.alpha.ln();
        let first = self.p.ln() + ln_alpha + (self.alpha - 1.0) * log_u;
        if self.epsilon == 0.0 {
            return first;
        }
        let ln_eps = self.epsilon.ln();
        if log_u > ln_eps {
            return first;
        }
        let second = (-self.p).ln_1p() - ln_eps + ln_alpha + (self.alpha - 1.0) * (log_u - ln_eps);
        log_add_exp(first, second)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub alpha: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

impl DpParams {
    pub fn new(alpha: f64, truncation: usize) -> Result<Self> {
        let params = Self { alpha, truncation };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::domain(format!("DP alpha must be > 0, got {}", self.alpha)));
        }
        check_truncation(self.truncation)
    }
}

/// Pitman–Yor parameters: `v_k ~ Beta(1 - d, α + k d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyParams {
    pub alpha: f64,
    pub discount: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

impl PyParams {
    pub fn new(alpha: f64, discount: f64, truncation: usize) -> Result<Self> {
        let params = Self {
            alpha,
            discount,
            truncation,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::domain(format!(
                "PY discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > -self.discount) {
            return Err(Error::domain(format!(
                "PY alpha must exceed -discount, got alpha={} discount={}",
                self.alpha, self.discount
            )));
        }
        check_truncation(self.truncation)
    }

    /// Beta parameters of the break at 0-based position `k`.
    pub(crate) fn break_shape(&self, k: usize) -> (f64, f64) {
        (
            1.0 - self.discount,
            self.alpha + (k + 1) as f64 * self.discount,
        )
    }
}

fn check_truncation(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::domain(format!("truncation must be >= 2, got {m}")));
    }
    Ok(())
}

/// A stick-breaking prior on mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prior {
    Qb(QbParams),
    Dp(DpParams),
    Py(PyParams),
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::Qb(p) => p.validate(),
            Prior::Dp(p) => p.validate(),
            Prior::Py(p) => p.validate(),
        }
    }

    pub fn truncation(&self) -> usize {
        match self {
            Prior::Qb(p) => p.truncation,
            Prior::Dp(p) => p.truncation,
            Prior::Py(p) => p.truncation,
        }
    }

    pub fn with_truncation(mut self, m: usize) -> Self {
        match &mut self {
            Prior::Qb(p) => p.truncation = m,
            Prior::Dp(p) => p.truncation = m,
            Prior::Py(p) => p.truncation = m,
        }
        self
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Prior::Qb(_) => "qb",
            Prior::Dp(_) => "dp",
            Prior::Py(_) => "py",
        }
    }

    /// Draw truncated weights (`v_M = 1`).
    pub fn draw_sticks(&self, rng: &mut RandomSource) -> StickState {
        match self {
            Prior::Qb(p) => draw_qb_sticks(p, rng),
            Prior::Dp(p) => draw_dp_sticks(p, rng),
            Prior::Py(p) => draw_py_sticks(p, rng),
        }
    }

    /// `ln` density of the break `v` at 0-based position `k`, given
    /// `log_u = ln(1 - v)`.
    pub(crate) fn ln_break_density(&self, k: usize, log_u: f64) -> f64 {
        match self {
            Prior::Qb(p) => p.ln_break_density(log_u),
            Prior::Dp(p) => p.alpha.ln() + (p.alpha - 1.0) * log_u,
            Prior::Py(p) => {
                let (a, b) = p.break_shape(k);
                (a - 1.0) * log1m_exp(log_u) + (b - 1.0) * log_u - ln_beta(a, b)
            }
        }
    }
}

/// Truncated stick state: latent QB multipliers plus log weights.
///
/// `b[k]` and `beta[k]` are the latent pair with `1 - v_k = b_k β_k`; for
/// DP and PY sticks `b_k = 1`. The last component absorbs the rest of the
/// stick (`v_M = 1`), so its `b`/`beta` entries are unused and set to 1/0.
#[derive(Debug, Clone, PartialEq)]
pub struct StickState {
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
    log_w: Vec<f64>,
    log_rem: Vec<f64>,
}

impl StickState {
    /// Builds the state from per-break logs `ln v_k` and `ln(1 - v_k)` for
    /// `k < M - 1`; the final component takes what is left.
    pub(crate) fn from_breaks(b: Vec<f64>, beta: Vec<f64>, log_v: &[f64], log_1mv: &[f64]) -> Self {
        let m = b.len();
        debug_assert_eq!(log_v.len() + 1, m);
        let mut log_w = Vec::with_capacity(m);
        let mut log_stick = 0.0;
        for (lv, l1mv) in log_v.iter().zip(log_1mv) {
            log_w.push(log_stick + lv);
            log_stick += l1mv;
        }
        log_w.push(log_stick);
        let mut state = Self {
            b,
            beta,
            log_w,
            log_rem: vec![f64::NEG_INFINITY; m],
        };
        state.refresh_remaining();
        state
    }

    /// Recomputes `ln R_k = ln Σ_{l>k} w_l` from the log weights.
    pub(crate) fn refresh_remaining(&mut self) {
        let m = self.log_w.len();
        self.log_rem[m - 1] = f64::NEG_INFINITY;
        for k in (0..m - 1).rev() {
            self.log_rem[k] = log_add_exp(self.log_w[k + 1], self.log_rem[k + 1]);
        }
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|l| l.exp()).collect()
    }

    /// `ln R_k`: log mass of the stick remaining after component `k` (0-based).
    pub fn log_remaining_after(&self, k: usize) -> f64 {
        self.log_rem[k]
    }

    /// `ln R_{k-1}`, the stick left before component `k` is broken off.
    pub fn log_remaining_before(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.log_rem[k - 1]
        }
    }

    /// `ln(1 - v_k)` for `k < M - 1`.
    pub fn log_one_minus_v(&self, k: usize) -> f64 {
        self.log_rem[k] - self.log_remaining_before(k)
    }

    /// Exchanges components `k` and `k + 1` and re-derives the latent pair at
    /// both positions (`b = 1` when `1 - v > ε`, else `b = ε`).
    pub(crate) fn swap_adjacent(&mut self, k: usize, epsilon: f64) {
        self.log_w.swap(k, k + 1);
        self.log_rem[k] = log_add_exp(self.log_w[k + 1], self.log_rem[k + 1]);
        let m = self.len();
        for j in [k, k + 1] {
            if j + 1 < m {
                let u = self.log_one_minus_v(j).exp();
                let b = if u > epsilon || epsilon == 0.0 { 1.0 } else { epsilon };
                self.b[j] = b;
                self.beta[j] = u / b;
            }
        }
    }
}

/// Draws QB sticks: `b_k = 1` w.p. `p` else `ε`, `β_k = U^{1/α}`.
pub fn draw_qb_sticks(params: &QbParams, rng: &mut RandomSource) -> StickState {
    let m = params.truncation;
    let mut b = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut log_v = Vec::with_capacity(m - 1);
    let mut log_1mv = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        let bk = if rng.uniform() < params.p { 1.0 } else { params.epsilon };
        let ln_beta = rng.uniform().ln() / params.alpha;
        let l1mv = bk.ln() + ln_beta;
        b.push(bk);
        beta.push(ln_beta.exp());
        log_1mv.push(l1mv);
        log_v.push(log1m_exp(l1mv));
    }
    b.push(1.0);
    beta.push(0.0);
    StickState::from_breaks(b, beta, &log_v, &log_1mv)
}

/// The `ε = 0` construction: `K ~ Geometric(1 - p)` on `{1, 2, ...}`,
/// `v_1..v_{K-1} ~ Beta(1, α)`, `v_K = 1`. The returned state has exactly
/// `K` components, all with positive weight.
pub fn draw_qb0(params: &QbParams, rng: &mut RandomSource) -> StickState {
    let k = 1 + (rng.uniform().ln() / params.p.ln()).floor() as usize;
    let mut log_v = Vec::with_capacity(k - 1);
    let mut log_1mv = Vec::with_capacity(k - 1);
    for _ in 0..k - 1 {
        let l1mv = rng.uniform().ln() / params.alpha;
        log_1mv.push(l1mv);
        log_v.push(log1m_exp(l1mv));
    }
    let beta = log_1mv.iter().map(|l| l.exp()).chain([0.0]).collect();
    StickState::from_breaks(vec![1.0; k], beta, &log_v, &log_1mv)
}

/// DP(α) sticks: `1 - v_k = U^{1/α}`.
pub fn draw_dp_sticks(params: &DpParams, rng: &mut RandomSource) -> StickState {
    let m = params.truncation;
    let mut log_v = Vec::with_capacity(m - 1);
    let mut log_1mv = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        let l1mv = rng.uniform().ln() / params.alpha;
        log_1mv.push(l1mv);
        log_v.push(log1m_exp(l1mv));
    }
    let beta = log_1mv.iter().map(|l| l.exp()).chain([0.0]).collect();
    StickState::from_breaks(vec![1.0; m], beta, &log_v, &log_1mv)
}

/// PY(α, d) sticks: `v_k ~ Beta(1 - d, α + k d)` via a gamma ratio, which
/// keeps both `ln v` and `ln(1 - v)` accurate.
pub fn draw_py_sticks(params: &PyParams, rng: &mut RandomSource) -> StickState {
    let m = params.truncation;
    let mut log_v = Vec::with_capacity(m - 1);
    let mut log_1mv = Vec::with_capacity(m - 1);
    for k in 0..m - 1 {
        let (a, b) = params.break_shape(k);
        let (lv, l1mv) = log_beta_pair(a, b, rng);
        log_v.push(lv);
        log_1mv.push(l1mv);
    }
    let beta = log_1mv.iter().map(|l| l.exp()).chain([0.0]).collect();
    StickState::from_breaks(vec![1.0; m], beta, &log_v, &log_1mv)
}

/// `(ln X, ln(1 - X))` for `X ~ Beta(a, b)`.
pub(crate) fn log_beta_pair(a: f64, b: f64, rng: &mut RandomSource) -> (f64, f64) {
    use rand_distr::{Distribution, Gamma};
    let ga: f64 = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    let gb: f64 = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
    let total = (ga + gb).ln();
    (ga.ln() - total, gb.ln() - total)
}

/// `ln f_V(v)`: the QB density of a single break.
pub fn log_density_v(v: f64, params: &QbParams) -> Result<f64> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::domain(format!("v must lie in [0, 1), got {v}")));
    }
    Ok(params.ln_break_density((-v).ln_1p()))
}

/// `ln p(w_k | w_1, ..., w_{k-1})`, which depends on the prefix only
/// through its sum.
pub fn log_density_w_conditional(w_k: f64, prefix_sum: f64, params: &QbParams) -> Result<f64> {
    if !(0.0..1.0).contains(&prefix_sum) {
        return Err(Error::domain(format!(
            "prefix sum must lie in [0, 1), got {prefix_sum}"
        )));
    }
    let rest = 1.0 - prefix_sum;
    if !(w_k >= 0.0 && w_k < rest) {
        return Err(Error::domain(format!(
            "w_k = {w_k} must lie in [0, {rest}) (the remaining stick)"
        )));
    }
    Ok(log_density_v(w_k / rest, params)? - rest.ln())
}

/// As [`log_density_w_conditional`], taking the prefix itself. The prefix
/// is summed in sorted order, so any permutation of it gives a
/// bit-identical result.
pub fn log_density_w_given_prefix(w_k: f64, prefix: &[f64], params: &QbParams) -> Result<f64> {
    let mut sorted = prefix.to_vec();
    sorted.sort_by(f64::total_cmp);
    log_density_w_conditional(w_k, sorted.iter().sum(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{ks_one_sample, ks_two_sample, mean_se};

    fn qb(p: f64, alpha: f64, eps: f64) -> QbParams {
        QbParams::new(p, alpha, eps, 50).unwrap()
    }

    #[test]
    fn validation() {
        assert!(QbParams::new(0.0, 1.0, 0.1, 10).is_err());
        assert!(QbParams::new(0.5, -1.0, 0.1, 10).is_err());
        assert!(QbParams::new(0.5, 1.0, 1.5, 10).is_err());
        assert!(QbParams::new(0.5, 1.0, 0.1, 1).is_err());
        assert!(PyParams::new(-0.2, 0.1, 10).is_err());
        assert!(PyParams::new(-0.05, 0.1, 10).is_ok());
        assert!(DpParams::new(0.0, 10).is_err());
    }

    #[test]
    fn consistency_rate() {
        for (alpha, r) in [(0.5, 0), (1.0, 0), (1.5, 1), (2.0, 1), (2.5, 2)] {
            let got = qb(0.9, alpha, 0.1).consistency_rate_r();
            assert_eq!(got, r, "alpha {alpha}");
            assert!((alpha - 1.0f64).max(0.0) <= got as f64 && (got as f64) < alpha);
        }
    }

    #[test]
    fn weights_on_simplex() {
        let mut rng = RandomSource::new(1, 0);
        let priors = [
            Prior::Qb(qb(0.9, 1.0, 1e-6)),
            Prior::Qb(qb(0.5, 0.3, 0.2)),
            Prior::Dp(DpParams::new(2.0, 40).unwrap()),
            Prior::Py(PyParams::new(0.5, 0.3, 40).unwrap()),
        ];
        for prior in priors {
            for _ in 0..2000 {
                let s = prior.draw_sticks(&mut rng);
                let w = s.weights();
                assert!(w.iter().all(|&x| x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qb_with_unit_epsilon_is_dp() {
        let mut rng = RandomSource::new(2, 0);
        let params = qb(0.7, 2.0, 1.0);
        let w1: Vec<f64> = (0..100_000).map(|_| draw_qb_sticks(&params, &mut rng).weights()[0]).collect();
        let (m, se) = mean_se(&w1);
        assert!((m - 1.0 / 3.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn tail_after_epsilon_break_is_bounded() {
        let mut rng = RandomSource::new(3, 0);
        let params = qb(0.9, 1.0, 1e-6);
        let mut seen = 0;
        for _ in 0..20_000 {
            let s = draw_qb_sticks(&params, &mut rng);
            if let Some(k) = s.b[..params.truncation - 1].iter().position(|&b| b < 1.0) {
                seen += 1;
                assert!(s.log_remaining_after(k).exp() < 1e-5);
            }
        }
        assert!(seen > 15_000);
    }

    #[test]
    fn qb0_geometric_count() {
        let mut rng = RandomSource::new(4, 0);
        let params = qb(0.9, 1.0, 0.0);
        let mut ks = Vec::new();
        let mut w1_given_k2 = Vec::new();
        for _ in 0..200_000 {
            let s = draw_qb0(&params, &mut rng);
            let w = s.weights();
            assert!(w.iter().all(|&x| x > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if s.len() == 1 {
                assert_eq!(w, vec![1.0]);
            } else {
                w1_given_k2.push(w[0]);
            }
            ks.push(s.len() as f64);
        }
        let (m, se) = mean_se(&ks);
        assert!((m - 10.0).abs() < 3.0 * se, "{m} ± {se}");
        // w_1 = v_1 ~ Beta(1, 1) when K >= 2
        let d = ks_one_sample(&mut w1_given_k2, |x| x);
        assert!(d < 1.63 / (w1_given_k2.len() as f64).sqrt(), "KS {d}");
    }

    #[test]
    fn dp_first_weight_mean() {
        let mut rng = RandomSource::new(5, 0);
        let params = DpParams::new(1.0, 30).unwrap();
        let w1: Vec<f64> = (0..100_000).map(|_| draw_dp_sticks(&params, &mut rng).weights()[0]).collect();
        let (m, se) = mean_se(&w1);
        assert!((m - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn py_without_discount_matches_dp() {
        let mut rng = RandomSource::new(6, 0);
        let dp = DpParams::new(1.3, 30).unwrap();
        let py = PyParams::new(1.3, 0.0, 30).unwrap();
        let mut a: Vec<f64> = (0..50_000).map(|_| draw_dp_sticks(&dp, &mut rng).weights()[0]).collect();
        let mut b: Vec<f64> = (0..50_000).map(|_| draw_py_sticks(&py, &mut rng).weights()[0]).collect();
        let d = ks_two_sample(&mut a, &mut b);
        // 1% critical value for equal sample sizes
        assert!(d < 1.63 * (2.0 / 50_000.0f64).sqrt(), "KS {d}");
    }

    #[test]
    fn density_v_branches() {
        let params = qb(0.9, 1.7, 1.0);
        for &v in &[0.0, 0.2, 0.9, 0.999] {
            let want = 1.7f64.ln() + 0.7 * f64::ln(1.0 - v);
            assert!((log_density_v(v, &params).unwrap() - want).abs() < 1e-12);
        }
        let params = qb(0.9, 1.7, 0.01);
        let v = 0.5;
        let want = 0.9f64.ln() + 1.7f64.ln() + 0.7 * 0.5f64.ln();
        assert!((log_density_v(v, &params).unwrap() - want).abs() < 1e-12);
        assert!(log_density_v(1.0, &params).is_err());
        assert!(log_density_v(-0.1, &params).is_err());
    }

    #[test]
    fn conditional_density_change_of_variables() {
        let params = qb(0.9, 1.0, 0.01);
        for &x in &[0.01, 0.2, 0.4999] {
            let first = log_density_w_conditional(x, 0.0, &params).unwrap();
            assert_eq!(first, log_density_v(x, &params).unwrap());
            let half = log_density_w_conditional(x, 0.5, &params).unwrap();
            let want = log_density_v(2.0 * x, &params).unwrap() + 2f64.ln();
            assert!((half - want).abs() < 1e-12);
        }
        assert!(log_density_w_conditional(0.6, 0.5, &params).is_err());
    }

    #[test]
    fn swap_twice_restores_weights() {
        let mut rng = RandomSource::new(7, 0);
        let params = qb(0.9, 1.0, 1e-3);
        let s = draw_qb_sticks(&params, &mut rng);
        for k in 0..params.truncation - 1 {
            let mut t = s.clone();
            t.swap_adjacent(k, params.epsilon);
            t.swap_adjacent(k, params.epsilon);
            assert_eq!(t.log_weights(), s.log_weights());
        }
    }

    proptest::proptest! {
        #[test]
        fn prefix_permutation_invariance(
            raw in proptest::collection::vec(0.01f64..1.0, 1..8),
            seed in 0u64..1000,
            frac in 0.0f64..0.99,
        ) {
            let total: f64 = raw.iter().sum::<f64>() * 1.25;
            let prefix: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let rest = 1.0 - prefix.iter().sum::<f64>();
            let w = frac * rest;
            let params = qb(0.9, 1.3, 0.05);
            let base = log_density_w_given_prefix(w, &prefix, &params).unwrap();
            let mut shuffled = prefix.clone();
            let mut rng = RandomSource::new(seed, 0);
            for i in (1..shuffled.len()).rev() {
                let j = rng.below(i + 1);
                shuffled.swap(i, j);
            }
            let again = log_density_w_given_prefix(w, &shuffled, &params).unwrap();
            proptest::prop_assert_eq!(base.to_bits(), again.to_bits());
        }
    }
}

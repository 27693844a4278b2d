//! Exchangeable partition probability functions.
//!
//! The QB EPPF is a sum over orderings of the blocks, which is factorial in
//! the number of blocks `t`. Orderings that differ only by exchanging blocks
//! of equal size contribute identical terms, so the sum runs over distinct
//! arrangements of the size multiset and multiplies by `Π mult!`. All
//! evaluation is in log scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ln_beta, ln_gamma, ln_inc_beta, log_add_exp, log_sum_exp, RandomSource};
use crate::priors::{draw_qb0, Prior, QbParams};

/// Largest block count the QB permutation sum accepts (10! = 3.6e6 terms).
pub const MAX_QB_BLOCKS: usize = 10;
/// Largest `n` for labeled set-partition enumeration (Bell(12) = 4,213,597).
pub const MAX_ENUMERATION_N: usize = 12;
/// Largest number of compositions `prob_new_cluster` will sum over.
pub const MAX_COMPOSITIONS: usize = 2_000_000;

/// A partition described by its block sizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    block_sizes: Vec<usize>,
}

impl Partition {
    pub fn new(block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.is_empty() {
            return Err(Error::domain("a partition needs at least one block"));
        }
        if block_sizes.contains(&0) {
            return Err(Error::domain("block sizes must be positive"));
        }
        Ok(Self { block_sizes })
    }

    /// The partition induced by component labels.
    pub fn from_assignments(labels: &[usize]) -> Result<Self> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut order = Vec::new();
        for &c in labels {
            let e = counts.entry(c).or_insert(0);
            if *e == 0 {
                order.push(c);
            }
            *e += 1;
        }
        Self::new(order.iter().map(|c| counts[c]).collect())
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn n(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn t(&self) -> usize {
        self.block_sizes.len()
    }

    /// Block sizes in ascending order.
    pub fn sorted_sizes(&self) -> Vec<usize> {
        let mut s = self.block_sizes.clone();
        s.sort_unstable();
        s
    }

    /// Number of labeled set partitions of `{1..n}` with this size profile:
    /// `n! / (Π n_j! · Π mult_s!)`.
    pub fn labeled_count(&self) -> f64 {
        let mut ln = ln_gamma(self.n() as f64 + 1.0);
        for &s in &self.block_sizes {
            ln -= ln_gamma(s as f64 + 1.0);
        }
        for mult in multiplicities(&self.sorted_sizes()) {
            ln -= ln_gamma(mult as f64 + 1.0);
        }
        ln.exp().round()
    }
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.block_sizes
    }
}

/// A base partition grown by `m` further points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionExtension {
    pub base: Partition,
    pub added_per_block: Vec<usize>,
    pub new_blocks: Vec<usize>,
}

impl PartitionExtension {
    pub fn new(base: Partition, added_per_block: Vec<usize>, new_blocks: Vec<usize>) -> Result<Self> {
        if added_per_block.len() != base.t() {
            return Err(Error::domain(format!(
                "extension has {} block increments for {} blocks",
                added_per_block.len(),
                base.t()
            )));
        }
        if new_blocks.contains(&0) {
            return Err(Error::domain("new blocks must be nonempty"));
        }
        Ok(Self {
            base,
            added_per_block,
            new_blocks,
        })
    }

    pub fn added(&self) -> usize {
        self.added_per_block.iter().sum::<usize>() + self.new_blocks.iter().sum::<usize>()
    }

    pub fn extended(&self) -> Partition {
        let mut sizes: Vec<usize> = self
            .base
            .block_sizes
            .iter()
            .zip(&self.added_per_block)
            .map(|(a, b)| a + b)
            .collect();
        sizes.extend(&self.new_blocks);
        Partition { block_sizes: sizes }
    }
}

fn multiplicities(sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&s| s == sorted[i]).count();
        out.push(j);
        i += j;
    }
    out
}

/// Lexicographic successor of `v`; false once `v` is the last arrangement.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// `ln Pr_{ε,n}(A)` under the QB prior. `epsilon = 0` evaluates the
/// geometric-truncation limit.
pub fn log_eppf_qb(part: &Partition, p: f64, alpha: f64, epsilon: f64) -> Result<f64> {
    QbParams::new(p, alpha, epsilon, 2)?;
    let t = part.t();
    if t > MAX_QB_BLOCKS {
        return Err(Error::Capacity {
            what: "QB EPPF block count",
            requested: t,
            limit: MAX_QB_BLOCKS,
        });
    }
    let n = part.n();
    let mut sizes = part.sorted_sizes();

    let ln_p = p.ln();
    let ln_1mp = (-p).ln_1p();
    let ln_eps = epsilon.ln();

    // numerator of the factor for a block of size `s` followed by `g_next`
    // points, and denominator for a suffix holding `g` points
    let mut num_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut numerator = |s: usize, g_next: usize, last: bool| -> Result<f64> {
        if let Some(&v) = num_cache.get(&(s, g_next)) {
            return Ok(v);
        }
        let v = if epsilon == 0.0 {
            if last {
                log_add_exp(ln_p, ln_1mp - alpha.ln() - ln_beta(alpha, s as f64 + 1.0))
            } else {
                ln_p
            }
        } else {
            let ln_i = ln_inc_beta(epsilon, g_next as f64 + alpha, s as f64 + 1.0)?;
            log_add_exp(ln_p, ln_1mp + ln_i - alpha * ln_eps)
        };
        num_cache.insert((s, g_next), v);
        Ok(v)
    };
    let denominator = |g: usize| -> f64 {
        let g = g as f64;
        if epsilon == 0.0 {
            (g + alpha * (1.0 - p)).ln()
        } else {
            // 1 - ε^g, accurate for ε near 1
            let one_minus = -(g * ln_eps).exp_m1();
            (g + alpha * (1.0 - p) * one_minus).ln()
        }
    };

    let mut terms = Vec::new();
    loop {
        let mut acc = 0.0;
        let mut g_next = 0;
        for j in (0..t).rev() {
            let s = sizes[j];
            acc += numerator(s, g_next, j == t - 1)?;
            g_next += s;
            acc -= denominator(g_next);
        }
        terms.push(acc);
        if !next_permutation(&mut sizes) {
            break;
        }
    }

    let ln_mult: f64 = multiplicities(&part.sorted_sizes())
        .iter()
        .map(|&m| ln_gamma(m as f64 + 1.0))
        .sum();
    let ln_blocks: f64 = part
        .sorted_sizes()
        .iter()
        .map(|&s| ln_gamma(s as f64 + 1.0))
        .sum();
    Ok(t as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(n as f64 + alpha)
        + ln_blocks
        + ln_mult
        + log_sum_exp(&terms))
}

/// `ln[α^t Γ(α)/Γ(n+α) · Π (n_j - 1)!]`.
pub fn log_eppf_dp(part: &Partition, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain(format!("DP alpha must be > 0, got {alpha}")));
    }
    let ln_blocks: f64 = part.sorted_sizes().iter().map(|&s| ln_gamma(s as f64)).sum();
    Ok(part.t() as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(part.n() as f64 + alpha) + ln_blocks)
}

/// Two-parameter (Pitman–Yor) EPPF:
/// `Π_{i<t}(α + i d) / (α+1)_{n-1} · Π (1-d)_{n_j - 1}`.
/// With `d = 0` this is [`log_eppf_dp`] exactly.
pub fn log_eppf_py(part: &Partition, alpha: f64, discount: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&discount) || !(alpha.is_finite() && alpha > -discount) {
        return Err(Error::domain(format!(
            "PY requires 0 <= d < 1 and alpha > -d, got alpha={alpha}, d={discount}"
        )));
    }
    if discount == 0.0 {
        return log_eppf_dp(part, alpha);
    }
    let t = part.t();
    let n = part.n() as f64;
    let ln_new: f64 = (1..t).map(|i| (alpha + i as f64 * discount).ln()).sum();
    let ln_rising = ln_gamma(alpha + n) - ln_gamma(alpha + 1.0);
    let ln_blocks: f64 = part
        .sorted_sizes()
        .iter()
        .map(|&s| ln_gamma(s as f64 - discount) - ln_gamma(1.0 - discount))
        .sum();
    Ok(ln_new - ln_rising + ln_blocks)
}

impl Prior {
    /// Log EPPF of the (untruncated) prior.
    pub fn log_eppf(&self, part: &Partition) -> Result<f64> {
        match self {
            Prior::Qb(q) => log_eppf_qb(part, q.p, q.alpha, q.epsilon),
            Prior::Dp(d) => log_eppf_dp(part, d.alpha),
            Prior::Py(y) => log_eppf_py(part, y.alpha, y.discount),
        }
    }
}

/// Labeled set partitions of `{0..n}` as restricted growth strings: each
/// item assigns element `i` to block `labels[i]`, with blocks numbered by
/// first appearance. Every set partition appears exactly once.
#[derive(Debug, Clone)]
pub struct SetPartitions {
    labels: Vec<usize>,
    maxima: Vec<usize>,
    done: bool,
}

impl SetPartitions {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("cannot enumerate partitions of an empty set"));
        }
        if n > MAX_ENUMERATION_N {
            return Err(Error::Capacity {
                what: "set-partition enumeration size",
                requested: n,
                limit: MAX_ENUMERATION_N,
            });
        }
        Ok(Self {
            labels: vec![0; n],
            maxima: vec![0; n],
            done: false,
        })
    }
}

impl Iterator for SetPartitions {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.labels.clone();
        // advance: rightmost position that can still grow
        let n = self.labels.len();
        let mut i = n - 1;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            if self.labels[i] <= self.maxima[i - 1] {
                self.labels[i] += 1;
                let m = self.maxima[i - 1].max(self.labels[i]);
                self.maxima[i] = m;
                for j in i + 1..n {
                    self.labels[j] = 0;
                    self.maxima[j] = m;
                }
                break;
            }
            i -= 1;
        }
        Some(out)
    }
}

/// Every labeled set partition of `{1..n}`, as block sizes (one item per
/// labeled partition, so size profiles repeat with their multiplicity).
pub fn enumerate_partitions(n: usize) -> Result<impl Iterator<Item = Partition>> {
    Ok(SetPartitions::new(n)?.map(|labels| {
        Partition::from_assignments(&labels).expect("nonempty restricted growth string")
    }))
}

/// Integer partitions of `n` (size profiles) with the number of labeled set
/// partitions sharing each profile.
pub fn size_profiles(n: usize) -> Vec<(Partition, f64)> {
    fn rec(rest: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Partition>) {
        if rest == 0 {
            out.push(Partition {
                block_sizes: cur.clone(),
            });
            return;
        }
        for s in (1..=rest.min(max)).rev() {
            cur.push(s);
            rec(rest - s, s, cur, out);
            cur.pop();
        }
    }
    let mut parts = Vec::new();
    if n > 0 {
        rec(n, n, &mut Vec::new(), &mut parts);
    }
    parts
        .into_iter()
        .map(|p| {
            let c = p.labeled_count();
            (p, c)
        })
        .collect()
}

/// Prior probability that `m` further points open at least one new block,
/// given the current partition: one minus the total mass of assignments
/// that put every new point into an existing block.
///
/// Sums over compositions `(m_1..m_t)` of `m` with multinomial weights,
/// using differences of log-EPPFs for each extension ratio.
pub fn prob_new_cluster(prior: &Prior, existing: &Partition, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::domain("m must be at least 1"));
    }
    let t = existing.t();
    let count = binomial(m + t - 1, t - 1);
    if count > MAX_COMPOSITIONS as f64 {
        return Err(Error::Capacity {
            what: "composition count",
            requested: count.min(usize::MAX as f64) as usize,
            limit: MAX_COMPOSITIONS,
        });
    }
    let base = prior.log_eppf(existing)?;
    let ln_m_fact = ln_gamma(m as f64 + 1.0);
    let mut log_terms = Vec::with_capacity(count as usize);
    let mut comp = vec![0usize; t];
    comp[t - 1] = m;
    loop {
        let ext = PartitionExtension::new(existing.clone(), comp.clone(), Vec::new())?;
        let ln_multinomial = ln_m_fact - comp.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum::<f64>();
        log_terms.push(ln_multinomial + prior.log_eppf(&ext.extended())? - base);
        if !next_composition(&mut comp) {
            break;
        }
    }
    let stay = log_sum_exp(&log_terms);
    Ok((-stay.exp_m1()).clamp(0.0, 1.0))
}

/// Closed form of the DP new-cluster probability:
/// `1 - Π_{l=1}^m (n+l-1)/(n+l-1+α)`.
pub fn dp_prob_new_cluster_closed_form(n: usize, alpha: f64, m: usize) -> f64 {
    let ln_stay: f64 = (1..=m)
        .map(|l| -(alpha / (n + l - 1) as f64).ln_1p())
        .sum();
    -ln_stay.exp_m1()
}

/// Steps through all compositions of `Σ comp` into `comp.len()` nonnegative
/// parts, starting from `(0, .., 0, m)`.
fn next_composition(comp: &mut [usize]) -> bool {
    let t = comp.len();
    if t == 1 {
        return false;
    }
    let last = comp[t - 1];
    if last > 0 {
        comp[t - 2] += 1;
        comp[t - 1] = last - 1;
        return true;
    }
    // tail is empty: carry
    let mut i = t - 2;
    loop {
        if i == 0 {
            return false;
        }
        if comp[i] > 0 {
            let v = comp[i];
            comp[i] = 0;
            comp[i - 1] += 1;
            comp[t - 1] = v - 1;
            return true;
        }
        i -= 1;
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0))
        .exp()
        .round()
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimate of `Pr(A)` as
/// `E_w[Σ_{distinct k_1..k_t} Π_j w_{k_j}^{n_j}]` over prior weight draws.
///
/// The sum over distinct component tuples is evaluated exactly for each
/// draw by Möbius inversion over set partitions of the blocks, in terms of
/// the power sums `P(s) = Σ_k w_k^s`. A QB prior with `ε = 0` draws from the
/// geometric construction (no truncation); other priors use their
/// truncation, which must be at least 30.
pub fn mc_oracle_eppf(part: &Partition, prior: &Prior, samples: usize, rng: &mut RandomSource) -> Result<McEstimate> {
    Ok(mc_oracle_eppf_many(std::slice::from_ref(part), prior, samples, rng)?[0])
}

/// [`mc_oracle_eppf`] for several partitions sharing the same weight draws.
pub fn mc_oracle_eppf_many(
    parts: &[Partition],
    prior: &Prior,
    samples: usize,
    rng: &mut RandomSource,
) -> Result<Vec<McEstimate>> {
    prior.validate()?;
    let max_n = parts.iter().map(Partition::n).max().unwrap_or(0);
    if max_n > 8 {
        return Err(Error::Capacity {
            what: "oracle partition size",
            requested: max_n,
            limit: 8,
        });
    }
    let qb_zero = matches!(prior, Prior::Qb(q) if q.epsilon == 0.0);
    if !qb_zero && prior.truncation() < 30 {
        return Err(Error::domain(format!(
            "oracle truncation must be >= 30, got {}",
            prior.truncation()
        )));
    }
    if samples < 2 {
        return Err(Error::domain("oracle needs at least two samples"));
    }

    // each partition becomes a list of (Möbius coefficient, power-sum orders)
    let expansions: Vec<Vec<(f64, Vec<usize>)>> = parts.iter().map(mobius_expansion).collect();

    let mut sums = vec![0.0; parts.len()];
    let mut sq_sums = vec![0.0; parts.len()];
    let mut power = vec![0.0; max_n + 1];
    for _ in 0..samples {
        let sticks = match prior {
            Prior::Qb(q) if qb_zero => draw_qb0(q, rng),
            _ => prior.draw_sticks(rng),
        };
        power.iter_mut().for_each(|p| *p = 0.0);
        for lw in sticks.log_weights() {
            let w = lw.exp();
            let mut wp = 1.0;
            for p in power.iter_mut().skip(1) {
                wp *= w;
                *p += wp;
            }
        }
        for (i, exp) in expansions.iter().enumerate() {
            let value: f64 = exp
                .iter()
                .map(|(coef, orders)| coef * orders.iter().map(|&s| power[s]).product::<f64>())
                .sum();
            sums[i] += value;
            sq_sums[i] += value * value;
        }
    }
    let n = samples as f64;
    Ok(sums
        .iter()
        .zip(&sq_sums)
        .map(|(&s, &sq)| {
            let mean = s / n;
            let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
            McEstimate {
                estimate: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

fn mobius_expansion(part: &Partition) -> Vec<(f64, Vec<usize>)> {
    let sizes = part.block_sizes();
    let t = sizes.len();
    SetPartitions::new(t)
        .expect("t <= n <= 8")
        .map(|labels| {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut orders = vec![0usize; k];
            let mut members = vec![0usize; k];
            for (j, &l) in labels.iter().enumerate() {
                orders[l] += sizes[j];
                members[l] += 1;
            }
            // μ = Π_B (-1)^{|B|-1} (|B|-1)!
            let coef = members.iter().fold(1.0, |acc, &b| {
                let sign = if (b - 1) % 2 == 0 { 1.0 } else { -1.0 };
                acc * sign * ln_gamma(b as f64).exp().round()
            });
            (coef, orders)
        })
        .collect()
}

/// Exact total-variation distance between the QB partition laws at `ε` and
/// at `ε = 0`, by enumeration of size profiles.
pub fn tv_distance_small_n(n: usize, p: f64, alpha: f64, epsilon: f64) -> Result<f64> {
    if n == 0 || n > MAX_ENUMERATION_N {
        return Err(Error::Capacity {
            what: "TV enumeration size",
            requested: n,
            limit: MAX_ENUMERATION_N,
        });
    }
    let mut total = 0.0;
    for (part, count) in size_profiles(n) {
        let a = log_eppf_qb(&part, p, alpha, epsilon)?.exp();
        let b = log_eppf_qb(&part, p, alpha, 0.0)?.exp();
        total += count * (a - b).abs();
    }
    Ok(0.5 * total)
}

/// Upper bound `sqrt(αnε / (2(α + 1 - αεn)))` on the total-variation
/// distance; `guaranteed` is false when `ε > 1/n`, outside the bound's
/// hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvBound {
    pub value: f64,
    pub guaranteed: bool,
}

pub fn tv_bound(n: usize, alpha: f64, epsilon: f64) -> TvBound {
    let nf = n as f64;
    let denom = 2.0 * (alpha + 1.0 - alpha * epsilon * nf);
    let value = if denom > 0.0 {
        (alpha * nf * epsilon / denom).sqrt()
    } else {
        f64::INFINITY
    };
    TvBound {
        value,
        guaranteed: epsilon * nf <= 1.0,
    }
}

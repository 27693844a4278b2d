//! Truncated blocked Gibbs sampler.
//!
//! One iteration is a systematic scan of:
//! 1. assignments `c_i ~ Categorical(w_k f_{θ_k}(y_i))`;
//! 2. sticks given the counts `n_k = #{c_i = k}` and `m_k = #{c_i > k}`;
//! 3. component parameters given their members (and the Gaussian `γ`);
//! 4. optionally, Metropolis–Hastings proposals that exchange two adjacent
//!    components. The QB stick law is not invariant under reordering, so
//!    without this move the sampler mixes poorly over component order.
//!
//! Indices are 0-based throughout; component `M - 1` takes the remaining
//! stick (`v_M = 1`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::components::{
    derive_data_dependent_hyper, log_marginal_fixed_variance, sample_component_posterior, update_gamma_hyper,
    ComponentParams, Dataset, GammaUpdate, ModelHyper, ModelKind,
};
use crate::eppf::{Partition, SetPartitions};
use crate::error::{Error, Result};
use crate::numerics::{ln_inc_beta, log_add_exp, log_sum_exp, sample_beta_truncated, RandomSource};
use crate::priors::{log_beta_pair, Prior, QbParams, StickState};

/// Largest `n` for [`exact_posterior_t`].
pub const MAX_EXACT_N: usize = 10;

/// Full state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub assignments: Vec<usize>,
    pub sticks: StickState,
    pub params: Vec<ComponentParams>,
    pub hyper: ModelHyper,
    counts: Vec<usize>,
    tail: Vec<usize>,
}

impl ChainState {
    /// Draws weights, component parameters and assignments from the prior.
    pub fn from_prior(prior: &Prior, hyper: ModelHyper, n: usize, rng: &mut RandomSource) -> Result<Self> {
        prior.validate()?;
        let sticks = prior.draw_sticks(rng);
        let m = sticks.len();
        let params = (0..m)
            .map(|_| sample_component_posterior(&hyper, &[], &ComponentParams::Null, rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = sticks.weights();
        let assignments = (0..n).map(|_| categorical_linear(&weights, rng)).collect();
        let mut state = Self {
            assignments,
            sticks,
            params,
            hyper,
            counts: vec![0; m],
            tail: vec![0; m],
        };
        state.recount();
        Ok(state)
    }

    pub fn truncation(&self) -> usize {
        self.sticks.len()
    }

    /// `n_k`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `m_k = Σ_{l > k} n_l`.
    pub fn tail_counts(&self) -> &[usize] {
        &self.tail
    }

    /// Number of occupied components.
    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Block sizes of the induced partition.
    pub fn partition(&self) -> Option<Partition> {
        Partition::from_assignments(&self.assignments).ok()
    }

    /// Whether the cached counts equal a fresh recount.
    pub fn counts_consistent(&self) -> bool {
        let mut copy = self.clone();
        copy.recount();
        copy.counts == self.counts && copy.tail == self.tail
    }

    fn recount(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for &c in &self.assignments {
            self.counts[c] += 1;
        }
        self.refresh_tail();
    }

    fn refresh_tail(&mut self) {
        let m = self.counts.len();
        self.tail[m - 1] = 0;
        for k in (0..m - 1).rev() {
            self.tail[k] = self.tail[k + 1] + self.counts[k + 1];
        }
    }
}

fn categorical_linear(weights: &[f64], rng: &mut RandomSource) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (k, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Step 1: resample every assignment from its full conditional.
pub fn update_assignments(state: &mut ChainState, data: &Dataset, rng: &mut RandomSource) -> Result<()> {
    let prepared: Vec<_> = state.params.iter().map(ComponentParams::prepare).collect();
    let log_w = state.sticks.log_weights();
    let m = log_w.len();
    let mut scores = vec![0.0; m];
    for (i, y) in data.rows().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..m {
            let s = log_w[k] + prepared[k].eval(y);
            scores[k] = s;
            max = max.max(s);
        }
        if !max.is_finite() {
            return Err(Error::numeric(
                "update_assignments",
                format!("observation {i} has no component with finite weight"),
            ));
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let mut u = rng.uniform() * total;
        let mut chosen = m - 1;
        for (k, &s) in scores.iter().enumerate() {
            u -= s;
            if u < 0.0 {
                chosen = k;
                break;
            }
        }
        state.assignments[i] = chosen;
    }
    state.recount();
    Ok(())
}

/// Step 2 under the QB prior. For each `k < M - 1`, draws `b_k` with
/// `P(b_k = 1) = q_k`, where
/// `q_k = p / (p + (1-p) ε^{-α} I_ε(m_k+α, n_k+1))` in log scale, then the
/// break given `b_k`: `v_k ~ Beta(n_k+1, m_k+α)` if `b_k = 1`, otherwise
/// `1 - v_k ~ Beta(m_k+α, n_k+1)` truncated to `(0, ε)`.
pub fn update_sticks_qb(state: &mut ChainState, params: &QbParams, rng: &mut RandomSource) -> Result<()> {
    if !(params.epsilon > 0.0) {
        return Err(Error::domain("the Gibbs sampler needs epsilon > 0"));
    }
    let m = state.truncation();
    let ln_p = params.p.ln();
    let ln_1mp = (-params.p).ln_1p();
    let ln_eps = params.epsilon.ln();
    let mut b = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut log_v = Vec::with_capacity(m - 1);
    let mut log_1mv = Vec::with_capacity(m - 1);
    for k in 0..m - 1 {
        let (nk, mk) = (state.counts[k] as f64, state.tail[k] as f64);
        let (a, bb) = (mk + params.alpha, nk + 1.0);
        let ln_q = if nk == 0.0 && mk == 0.0 {
            ln_p
        } else {
            let ln_i = ln_inc_beta(params.epsilon, a, bb).map_err(|e| {
                Error::numeric(
                    "update_sticks_qb",
                    format!("{e} (n_k={nk}, m_k={mk}, epsilon={}, alpha={})", params.epsilon, params.alpha),
                )
            })?;
            ln_p - log_add_exp(ln_p, ln_1mp - params.alpha * ln_eps + ln_i)
        };
        if rng.uniform().ln() < ln_q {
            let (lv, l1mv) = log_beta_pair(bb, a, rng);
            b.push(1.0);
            beta.push(l1mv.exp());
            log_v.push(lv);
            log_1mv.push(l1mv);
        } else {
            let x = sample_beta_truncated(a, bb, params.epsilon, rng).map_err(|e| {
                Error::numeric(
                    "update_sticks_qb",
                    format!("{e} (n_k={nk}, m_k={mk}, epsilon={}, alpha={})", params.epsilon, params.alpha),
                )
            })?;
            b.push(params.epsilon);
            beta.push(x / params.epsilon);
            log_v.push((-x).ln_1p());
            log_1mv.push(x.ln());
        }
    }
    b.push(1.0);
    beta.push(0.0);
    state.sticks = StickState::from_breaks(b, beta, &log_v, &log_1mv);
    Ok(())
}

/// Step 2 under a DP prior: `v_k ~ Beta(1 + n_k, α + m_k)`.
pub fn update_sticks_dp(state: &mut ChainState, alpha: f64, rng: &mut RandomSource) -> Result<()> {
    update_sticks_py(state, alpha, 0.0, rng)
}

/// Step 2 under a PY prior: `v_k ~ Beta(1 - d + n_k, α + (k+1) d + m_k)`
/// for 0-based `k`.
pub fn update_sticks_py(state: &mut ChainState, alpha: f64, discount: f64, rng: &mut RandomSource) -> Result<()> {
    let m = state.truncation();
    let mut log_v = Vec::with_capacity(m - 1);
    let mut log_1mv = Vec::with_capacity(m - 1);
    for k in 0..m - 1 {
        let a = 1.0 - discount + state.counts[k] as f64;
        let b = alpha + (k + 1) as f64 * discount + state.tail[k] as f64;
        let (lv, l1mv) = log_beta_pair(a, b, rng);
        log_v.push(lv);
        log_1mv.push(l1mv);
    }
    let beta = log_1mv.iter().map(|l| l.exp()).chain([0.0]).collect();
    state.sticks = StickState::from_breaks(vec![1.0; m], beta, &log_v, &log_1mv);
    Ok(())
}

/// Step 3: component parameters from their conditionals, then the Gaussian
/// variance hyperparameter.
pub fn update_components(state: &mut ChainState, data: &Dataset, gamma: GammaUpdate, rng: &mut RandomSource) -> Result<()> {
    let m = state.truncation();
    let dim = data.dim();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (i, &c) in state.assignments.iter().enumerate() {
        members[c].extend_from_slice(data.row(i));
    }
    // the null model has no parameters and its placeholder rows are not data
    if state.hyper.kind() == ModelKind::Null {
        return Ok(());
    }
    debug_assert_eq!(dim, state.hyper.kind().dim());
    for k in 0..m {
        state.params[k] = sample_component_posterior(&state.hyper, &members[k], &state.params[k], rng)?;
    }
    if let ModelHyper::Gaussian(h) = &mut state.hyper {
        let sigma2: Vec<f64> = state
            .params
            .iter()
            .zip(&state.counts)
            .filter(|(_, &n)| match gamma {
                GammaUpdate::All => true,
                GammaUpdate::Occupied => n > 0,
                GammaUpdate::Disabled => false,
            })
            .filter_map(|(p, _)| match p {
                ComponentParams::Gaussian { sigma2, .. } => Some(*sigma2),
                _ => None,
            })
            .collect();
        update_gamma_hyper(h, &sigma2, rng)?;
    }
    Ok(())
}

/// Draws the position `k` (0-based, swapping `k` and `k + 1`) for a swap
/// proposal: `k + 1 ~ Geometric(1 - p)` truncated to `1..M-1` under QB,
/// uniform otherwise.
fn propose_swap_position(prior: &Prior, m: usize, rng: &mut RandomSource) -> usize {
    match prior {
        Prior::Qb(q) => {
            let mass = 1.0 - q.p.powi((m - 1) as i32);
            let k = ((-rng.uniform() * mass).ln_1p() / q.p.ln()).floor() as usize;
            k.min(m - 2)
        }
        _ => rng.below(m - 1),
    }
}

/// Log prior-density ratio `p(w') / p(w)` for exchanging components `k`
/// and `k + 1`. Each weight's conditional density depends on the earlier
/// weights only through their sum, so only the factors at positions `k`
/// and `k + 1` change; the final component has no factor.
pub fn swap_log_ratio(sticks: &StickState, prior: &Prior, k: usize) -> f64 {
    let m = sticks.len();
    let log_w = sticks.log_weights();
    let before = sticks.log_remaining_before(k);
    let after_k = sticks.log_remaining_after(k);
    let after_next = sticks.log_remaining_after(k + 1);
    // remaining stick after position k once w_k and w_{k+1} trade places
    let swapped_after_k = log_add_exp(log_w[k], after_next);

    let mut ratio = prior.ln_break_density(k, swapped_after_k - before) - prior.ln_break_density(k, after_k - before);
    if k + 1 < m - 1 {
        ratio += prior.ln_break_density(k + 1, after_next - swapped_after_k) - swapped_after_k;
        ratio -= prior.ln_break_density(k + 1, after_next - after_k) - after_k;
    }
    ratio
}

/// Step 4: one adjacent-swap Metropolis–Hastings proposal. Returns whether
/// it was accepted. On acceptance weights and parameters trade places and
/// assignments are relabeled.
pub fn mh_swap(state: &mut ChainState, prior: &Prior, rng: &mut RandomSource) -> bool {
    let m = state.truncation();
    if m < 2 {
        return false;
    }
    let k = propose_swap_position(prior, m, rng);
    let ratio = swap_log_ratio(&state.sticks, prior, k);
    if !(rng.uniform().ln() < ratio) {
        return false;
    }
    apply_swap(state, prior, k);
    true
}

fn apply_swap(state: &mut ChainState, prior: &Prior, k: usize) {
    let epsilon = match prior {
        Prior::Qb(q) => q.epsilon,
        _ => 1.0,
    };
    state.sticks.swap_adjacent(k, epsilon);
    state.params.swap(k, k + 1);
    for c in state.assignments.iter_mut() {
        if *c == k {
            *c = k + 1;
        } else if *c == k + 1 {
            *c = k;
        }
    }
    state.counts.swap(k, k + 1);
    state.tail[k] = state.tail[k + 1] + state.counts[k + 1];
}

/// Optional trace files written during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// CSV with header `iteration,T`, one row per kept iteration.
    pub t_csv: Option<PathBuf>,
    /// Newline-delimited JSON records `{iteration, assignments}`.
    pub partitions_ndjson: Option<PathBuf>,
}

fn default_thinning() -> usize {
    1
}

fn default_swaps() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iterations: usize,
    pub burn_in: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    pub prior: Prior,
    pub model: ModelKind,
    #[serde(default = "default_true")]
    pub swap_move: bool,
    #[serde(default = "default_swaps")]
    pub swaps_per_iteration: usize,
    #[serde(default)]
    pub gamma_update: GammaUpdate,
    #[serde(default)]
    pub trace: TraceOptions,
}

impl RunConfig {
    pub fn new(prior: Prior, model: ModelKind, iterations: usize, burn_in: usize, thinning: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            thinning,
            seed,
            stream: 0,
            prior,
            model,
            swap_move: true,
            swaps_per_iteration: 1,
            gamma_update: GammaUpdate::All,
            trace: TraceOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        self.prior.validate()?;
        if let Prior::Qb(q) = self.prior {
            if q.epsilon == 0.0 {
                return Err(Error::Config("the Gibbs sampler needs epsilon > 0".into()));
            }
        }
        Ok(())
    }

    /// Iterations whose state is kept (1-based iteration numbers).
    pub fn is_kept(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thinning == 0
    }
}

/// Output of one chain. Equality ignores wall-clock timing.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSummary {
    pub prior: String,
    pub n: usize,
    pub t_trace: Vec<usize>,
    /// `t_histogram[t]` counts kept iterations with `T = t`.
    pub t_histogram: Vec<u64>,
    pub swap_proposals: u64,
    pub swap_accepts: u64,
    pub seconds_per_iteration: f64,
    pub seed: u64,
    pub stream: u64,
    /// Generator position after the run.
    pub final_word_pos: u128,
}

impl PartialEq for PosteriorSummary {
    fn eq(&self, other: &Self) -> bool {
        self.prior == other.prior
            && self.n == other.n
            && self.t_trace == other.t_trace
            && self.t_histogram == other.t_histogram
            && self.swap_proposals == other.swap_proposals
            && self.swap_accepts == other.swap_accepts
            && self.seed == other.seed
            && self.stream == other.stream
            && self.final_word_pos == other.final_word_pos
    }
}

impl PosteriorSummary {
    pub fn kept(&self) -> usize {
        self.t_trace.len()
    }

    pub fn swap_acceptance_rate(&self) -> f64 {
        if self.swap_proposals == 0 {
            0.0
        } else {
            self.swap_accepts as f64 / self.swap_proposals as f64
        }
    }

    /// Posterior probabilities `Pr(T = t | y)` for `t = 0..=n`.
    pub fn t_probabilities(&self) -> Vec<f64> {
        let kept = self.kept() as f64;
        self.t_histogram.iter().map(|&c| c as f64 / kept).collect()
    }

    pub fn t_mode(&self) -> usize {
        self.t_histogram
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(t, _)| t)
    }
}

/// Runs one chain: scan of steps 1 to 4 per iteration, with burn-in and
/// thinning. The model hyperparameters are derived from the data.
pub fn run_chain(config: &RunConfig, data: &Dataset, rng: &mut RandomSource) -> Result<PosteriorSummary> {
    run_chain_with(config, data, rng, |_, _| Ok(()))
}

/// [`run_chain`] with a callback on every kept iteration.
pub fn run_chain_with(
    config: &RunConfig,
    data: &Dataset,
    rng: &mut RandomSource,
    mut on_kept: impl FnMut(usize, &ChainState) -> Result<()>,
) -> Result<PosteriorSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::domain("cannot run a chain on an empty dataset"));
    }
    let hyper = if config.model == ModelKind::Null {
        ModelHyper::Null
    } else {
        if data.dim() != config.model.dim() {
            return Err(Error::domain(format!(
                "data has dimension {}, the {} model expects {}",
                data.dim(),
                config.model.name(),
                config.model.dim()
            )));
        }
        derive_data_dependent_hyper(config.model, data)?
    };
    let n = data.len();
    let mut state = ChainState::from_prior(&config.prior, hyper, n, rng)?;

    let mut t_writer = match &config.trace.t_csv {
        Some(path) => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
            w.write_record(["iteration", "T"]).map_err(|e| csv_error(path, e))?;
            Some((path.clone(), w))
        }
        None => None,
    };
    let mut part_writer = match &config.trace.partitions_ndjson {
        Some(path) => Some((
            path.clone(),
            BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?),
        )),
        None => None,
    };

    let mut summary = PosteriorSummary {
        prior: config.prior.kind().to_string(),
        n,
        t_trace: Vec::new(),
        t_histogram: vec![0; n + 1],
        swap_proposals: 0,
        swap_accepts: 0,
        seconds_per_iteration: 0.0,
        seed: rng.seed(),
        stream: rng.stream(),
        final_word_pos: 0,
    };
    let start = Instant::now();
    for iteration in 1..=config.iterations {
        update_assignments(&mut state, data, rng)?;
        match &config.prior {
            Prior::Qb(q) => update_sticks_qb(&mut state, q, rng)?,
            Prior::Dp(d) => update_sticks_dp(&mut state, d.alpha, rng)?,
            Prior::Py(y) => update_sticks_py(&mut state, y.alpha, y.discount, rng)?,
        }
        update_components(&mut state, data, config.gamma_update, rng)?;
        if config.swap_move {
            for _ in 0..config.swaps_per_iteration {
                summary.swap_proposals += 1;
                if mh_swap(&mut state, &config.prior, rng) {
                    summary.swap_accepts += 1;
                }
            }
        }
        if config.is_kept(iteration) {
            let t = state.occupied();
            summary.t_trace.push(t);
            summary.t_histogram[t] += 1;
            if let Some((path, w)) = &mut t_writer {
                w.write_record([iteration.to_string(), t.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
            if let Some((path, w)) = &mut part_writer {
                let record = serde_json::json!({ "iteration": iteration, "assignments": state.assignments });
                writeln!(w, "{record}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_kept(iteration, &state)?;
        }
    }
    summary.seconds_per_iteration = start.elapsed().as_secs_f64() / config.iterations as f64;
    summary.final_word_pos = rng.word_pos();
    if let Some((path, mut w)) = t_writer {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some((path, mut w)) = part_writer {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(summary)
}

fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Exact `Pr(T = t | y)` for `t = 1..=n` under the fixed-variance Gaussian
/// model, by summing `Pr(A) Π_{B ∈ A} m(y_B)` over every set partition.
/// Marginals are cached per subset and EPPF values per size profile.
pub fn exact_posterior_t(data: &[f64], prior: &Prior) -> Result<Vec<f64>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::domain("exact posterior needs at least one observation"));
    }
    if n > MAX_EXACT_N {
        return Err(Error::Capacity {
            what: "exact posterior size",
            requested: n,
            limit: MAX_EXACT_N,
        });
    }
    let mut marginal = vec![0.0; 1 << n];
    let mut block = Vec::with_capacity(n);
    for (mask, slot) in marginal.iter_mut().enumerate().skip(1) {
        block.clear();
        block.extend((0..n).filter(|i| mask & (1 << i) != 0).map(|i| data[i]));
        *slot = log_marginal_fixed_variance(&block)?;
    }
    let mut eppf_cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut per_t: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    for labels in SetPartitions::new(n)? {
        let t = labels.iter().max().map_or(0, |m| m + 1);
        let mut masks = vec![0usize; t];
        for (i, &l) in labels.iter().enumerate() {
            masks[l] |= 1 << i;
        }
        let mut sizes: Vec<usize> = masks.iter().map(|m| m.count_ones() as usize).collect();
        sizes.sort_unstable();
        let ln_prior = match eppf_cache.get(&sizes) {
            Some(&v) => v,
            None => {
                let v = prior.log_eppf(&Partition::new(sizes.clone())?)?;
                eppf_cache.insert(sizes, v);
                v
            }
        };
        per_t[t].push(ln_prior + masks.iter().map(|&m| marginal[m]).sum::<f64>());
    }
    let by_t: Vec<f64> = per_t[1..]
        .iter()
        .map(|terms| if terms.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(terms) })
        .collect();
    let total = log_sum_exp(&by_t);
    Ok(by_t.iter().map(|l| (l - total).exp()).collect())
}

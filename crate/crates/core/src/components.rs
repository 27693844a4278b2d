//! Observation models: likelihoods, data-dependent base measures and the
//! conditional updates of component parameters.
//!
//! Supported models:
//! * `gaussian`: `N(μ, σ²)` with `μ ~ N(m_μ, s_μ²)`, `σ² ~ IG(2, γ)` and
//!   `γ ~ Gamma(g, h)`; `μ` and `σ²` are a priori independent, so the update
//!   is one Gibbs sweep over the two conditionals.
//! * `laplace`: `Lap(μ, λ)` with `μ ~ N(m_μ, σ_μ²)` and `λ ~ IG(2, 1)`.
//! * `mvgaussian`: bivariate `N(μ, Σ)` with `μ ~ N(m, C)` and
//!   `Σ ~ IW(Ψ, ν)` (`Σ⁻¹ ~ Wishart(ν, Ψ⁻¹)`).
//! * `fixedvar`: `N(θ, 1)` with `θ ~ N(0, 1)`; has a closed-form marginal.
//! * `null`: constant likelihood, for running the sampler on the prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gamma, sample_inv_gamma, sample_std_normal, RandomSource};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations stored row-major with a fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dataset dimension must be positive"));
        }
        if values.len() % dim != 0 {
            return Err(Error::domain(format!(
                "{} values do not form rows of dimension {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("dataset contains non-finite values"));
        }
        Ok(Self { dim, values })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    /// An empty dataset with `n` rows of dimension zero is not allowed, so
    /// prior-only runs use `n` zero-valued scalar rows with the `null` model.
    pub fn placeholder(n: usize) -> Self {
        Self {
            dim: 1,
            values: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gaussian,
    Laplace,
    MvGaussian,
    FixedVar,
    Null,
}

impl ModelKind {
    pub fn dim(self) -> usize {
        match self {
            ModelKind::MvGaussian => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gaussian => "gaussian",
            ModelKind::Laplace => "laplace",
            ModelKind::MvGaussian => "mvgaussian",
            ModelKind::FixedVar => "fixedvar",
            ModelKind::Null => "null",
        }
    }
}

pub type Mat2 = [[f64; 2]; 2];

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ComponentParams {
    Gaussian { mu: f64, sigma2: f64 },
    Laplace { mu: f64, lambda: f64 },
    MvGaussian { mu: [f64; 2], sigma: Mat2 },
    FixedVar { theta: f64 },
    Null,
}

impl ComponentParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ComponentParams::Gaussian { .. } => ModelKind::Gaussian,
            ComponentParams::Laplace { .. } => ModelKind::Laplace,
            ComponentParams::MvGaussian { .. } => ModelKind::MvGaussian,
            ComponentParams::FixedVar { .. } => ModelKind::FixedVar,
            ComponentParams::Null => ModelKind::Null,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ComponentParams::Gaussian { mu, sigma2 } => mu.is_finite() && *sigma2 > 0.0 && sigma2.is_finite(),
            ComponentParams::Laplace { mu, lambda } => mu.is_finite() && *lambda > 0.0 && lambda.is_finite(),
            ComponentParams::MvGaussian { mu, sigma } => {
                mu.iter().all(|m| m.is_finite()) && sigma[0][1] == sigma[1][0] && chol2(sigma).is_some()
            }
            ComponentParams::FixedVar { theta } => theta.is_finite(),
            ComponentParams::Null => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid component parameters {self:?}")))
        }
    }

    /// `ln f_θ(y)`.
    pub fn log_likelihood(&self, y: &[f64]) -> Result<f64> {
        let dim = self.kind().dim();
        if y.len() != dim {
            return Err(Error::domain(format!(
                "observation has dimension {}, the {} model expects {dim}",
                y.len(),
                self.kind().name()
            )));
        }
        self.validate()?;
        Ok(self.prepare().eval(y))
    }

    /// Caches the per-component constants of the log-likelihood.
    pub(crate) fn prepare(&self) -> PreparedLikelihood {
        match *self {
            ComponentParams::Gaussian { mu, sigma2 } => PreparedLikelihood::Gaussian {
                mu,
                half_precision: 0.5 / sigma2,
                constant: -0.5 * (LN_2PI + sigma2.ln()),
            },
            ComponentParams::Laplace { mu, lambda } => PreparedLikelihood::Laplace {
                mu,
                inv_scale: 1.0 / lambda,
                constant: -(2.0 * lambda).ln(),
            },
            ComponentParams::MvGaussian { mu, sigma } => {
                let det = det2(&sigma);
                PreparedLikelihood::MvGaussian {
                    mu,
                    precision: inv2(&sigma),
                    constant: -LN_2PI - 0.5 * det.ln(),
                }
            }
            ComponentParams::FixedVar { theta } => PreparedLikelihood::Gaussian {
                mu: theta,
                half_precision: 0.5,
                constant: -0.5 * LN_2PI,
            },
            ComponentParams::Null => PreparedLikelihood::Null,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum PreparedLikelihood {
    Gaussian { mu: f64, half_precision: f64, constant: f64 },
    Laplace { mu: f64, inv_scale: f64, constant: f64 },
    MvGaussian { mu: [f64; 2], precision: Mat2, constant: f64 },
    Null,
}

impl PreparedLikelihood {
    #[inline]
    pub(crate) fn eval(&self, y: &[f64]) -> f64 {
        match *self {
            PreparedLikelihood::Gaussian { mu, half_precision, constant } => {
                let d = y[0] - mu;
                constant - half_precision * d * d
            }
            PreparedLikelihood::Laplace { mu, inv_scale, constant } => constant - (y[0] - mu).abs() * inv_scale,
            PreparedLikelihood::MvGaussian { mu, precision, constant } => {
                let d0 = y[0] - mu[0];
                let d1 = y[1] - mu[1];
                let q = precision[0][0] * d0 * d0 + 2.0 * precision[0][1] * d0 * d1 + precision[1][1] * d1 * d1;
                constant - 0.5 * q
            }
            PreparedLikelihood::Null => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHyper {
    pub m_mu: f64,
    pub s_mu: f64,
    pub a_sigma: f64,
    /// Current inverse-gamma rate of `σ²`; resampled when the hyperprior is active.
    pub gamma: f64,
    pub g: f64,
    pub h: f64,
}

impl GaussianHyper {
    pub fn new(m_mu: f64, s_mu: f64) -> Result<Self> {
        if !(s_mu.is_finite() && s_mu > 0.0) || !m_mu.is_finite() {
            return Err(Error::domain(format!("need finite m_mu and s_mu > 0, got {m_mu}, {s_mu}")));
        }
        let g = 0.2;
        let h = 10.0 / (s_mu * s_mu);
        Ok(Self {
            m_mu,
            s_mu,
            a_sigma: 2.0,
            gamma: g / h,
            g,
            h,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceHyper {
    pub m_mu: f64,
    pub sigma_mu: f64,
    pub lambda_shape: f64,
    pub lambda_rate: f64,
}

impl LaplaceHyper {
    pub fn new(m_mu: f64, sigma_mu: f64) -> Result<Self> {
        if !(sigma_mu.is_finite() && sigma_mu > 0.0) || !m_mu.is_finite() {
            return Err(Error::domain(format!("need finite m_mu and sigma_mu > 0, got {m_mu}, {sigma_mu}")));
        }
        Ok(Self {
            m_mu,
            sigma_mu,
            lambda_shape: 2.0,
            lambda_rate: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvGaussianHyper {
    pub m: [f64; 2],
    pub c: Mat2,
    /// Inverse-Wishart scale `Ψ`.
    pub iw_scale: Mat2,
    pub iw_df: f64,
}

impl MvGaussianHyper {
    /// Base measure centred at `m` with spread `C`; `Σ⁻¹ ~ Wishart(df 2, C⁻¹/2)`,
    /// i.e. `Σ ~ IW(2C, 2)`.
    pub fn new(m: [f64; 2], c: Mat2) -> Result<Self> {
        if c[0][1] != c[1][0] || chol2(&c).is_none() {
            return Err(Error::domain(format!("covariance {c:?} is not symmetric positive definite")));
        }
        Ok(Self {
            m,
            c,
            iw_scale: [[2.0 * c[0][0], 2.0 * c[0][1]], [2.0 * c[1][0], 2.0 * c[1][1]]],
            iw_df: 2.0,
        })
    }
}

/// Hyperparameters of the base measure, tagged by model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelHyper {
    Gaussian(GaussianHyper),
    Laplace(LaplaceHyper),
    MvGaussian(MvGaussianHyper),
    FixedVar,
    Null,
}

impl ModelHyper {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelHyper::Gaussian(_) => ModelKind::Gaussian,
            ModelHyper::Laplace(_) => ModelKind::Laplace,
            ModelHyper::MvGaussian(_) => ModelKind::MvGaussian,
            ModelHyper::FixedVar => ModelKind::FixedVar,
            ModelHyper::Null => ModelKind::Null,
        }
    }
}

/// Base-measure hyperparameters computed from the data: mid-range and range
/// for the univariate models, sample mean and covariance in 2-D.
pub fn derive_data_dependent_hyper(kind: ModelKind, data: &Dataset) -> Result<ModelHyper> {
    if data.dim() != kind.dim() {
        return Err(Error::domain(format!(
            "data has dimension {}, the {} model expects {}",
            data.dim(),
            kind.name(),
            kind.dim()
        )));
    }
    let range = || -> Result<(f64, f64)> {
        let (lo, hi) = data
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
        if data.len() < 2 || hi <= lo {
            return Err(Error::domain(
                "data-dependent prior needs at least two distinct observations",
            ));
        }
        Ok(((hi + lo) / 2.0, hi - lo))
    };
    match kind {
        ModelKind::Gaussian => {
            let (m, s) = range()?;
            Ok(ModelHyper::Gaussian(GaussianHyper::new(m, s)?))
        }
        ModelKind::Laplace => {
            let (m, s) = range()?;
            Ok(ModelHyper::Laplace(LaplaceHyper::new(m, s)?))
        }
        ModelKind::MvGaussian => {
            let n = data.len();
            if n < 2 {
                return Err(Error::domain("2-D prior needs at least two observations"));
            }
            let nf = n as f64;
            let mut mean = [0.0; 2];
            for row in data.rows() {
                mean[0] += row[0];
                mean[1] += row[1];
            }
            mean = [mean[0] / nf, mean[1] / nf];
            let mut c = [[0.0; 2]; 2];
            for row in data.rows() {
                let d = [row[0] - mean[0], row[1] - mean[1]];
                c[0][0] += d[0] * d[0];
                c[0][1] += d[0] * d[1];
                c[1][1] += d[1] * d[1];
            }
            let scale = 1.0 / (nf - 1.0);
            let c = [[c[0][0] * scale, c[0][1] * scale], [c[0][1] * scale, c[1][1] * scale]];
            if chol2(&c).is_none() {
                return Err(Error::domain(
                    "sample covariance is singular; data are degenerate",
                ));
            }
            Ok(ModelHyper::MvGaussian(MvGaussianHyper::new(mean, c)?))
        }
        ModelKind::FixedVar => Ok(ModelHyper::FixedVar),
        ModelKind::Null => Ok(ModelHyper::Null),
    }
}

/// Laplace location update: random-walk Metropolis proposals per call.
pub const LAPLACE_MH_STEPS: usize = 5;

/// Draws component parameters from their full conditional given the
/// observations `ys` (row-major, model dimension) assigned to the
/// component. With no observations the draw is from the base measure.
pub fn sample_component_posterior(
    hyper: &ModelHyper,
    ys: &[f64],
    current: &ComponentParams,
    rng: &mut RandomSource,
) -> Result<ComponentParams> {
    let dim = hyper.kind().dim();
    if ys.len() % dim != 0 {
        return Err(Error::domain("observation buffer does not match model dimension"));
    }
    let n = ys.len() / dim;
    let nf = n as f64;
    match hyper {
        ModelHyper::Gaussian(h) => {
            let prior_var = h.s_mu * h.s_mu;
            let sigma2 = match current {
                ComponentParams::Gaussian { sigma2, .. } if n > 0 => *sigma2,
                _ => sample_inv_gamma(h.a_sigma, h.gamma, rng)?,
            };
            if n == 0 {
                let mu = h.m_mu + h.s_mu * sample_std_normal(rng);
                return Ok(ComponentParams::Gaussian { mu, sigma2 });
            }
            let sum: f64 = ys.iter().sum();
            let precision = 1.0 / prior_var + nf / sigma2;
            let mean = (h.m_mu / prior_var + sum / sigma2) / precision;
            let mu = mean + sample_std_normal(rng) / precision.sqrt();
            let ss: f64 = ys.iter().map(|y| (y - mu) * (y - mu)).sum();
            let sigma2 = sample_inv_gamma(h.a_sigma + 0.5 * nf, h.gamma + 0.5 * ss, rng)?;
            Ok(ComponentParams::Gaussian { mu, sigma2 })
        }
        ModelHyper::Laplace(h) => {
            if n == 0 {
                return Ok(ComponentParams::Laplace {
                    mu: h.m_mu + h.sigma_mu * sample_std_normal(rng),
                    lambda: sample_inv_gamma(h.lambda_shape, h.lambda_rate, rng)?,
                });
            }
            let mu0 = match current {
                ComponentParams::Laplace { mu, .. } => *mu,
                _ => h.m_mu,
            };
            let abs_dev = |mu: f64| ys.iter().map(|y| (y - mu).abs()).sum::<f64>();
            let lambda = sample_inv_gamma(h.lambda_shape + nf, h.lambda_rate + abs_dev(mu0), rng)?;
            let log_target = |mu: f64| {
                let z = (mu - h.m_mu) / h.sigma_mu;
                -0.5 * z * z - abs_dev(mu) / lambda
            };
            let step = 0.5 * h.sigma_mu / (nf + 1.0).sqrt();
            let mut mu = mu0;
            let mut current_lp = log_target(mu);
            for _ in 0..LAPLACE_MH_STEPS {
                let proposal = mu + step * sample_std_normal(rng);
                let lp = log_target(proposal);
                if rng.uniform().ln() < lp - current_lp {
                    mu = proposal;
                    current_lp = lp;
                }
            }
            Ok(ComponentParams::Laplace { mu, lambda })
        }
        ModelHyper::MvGaussian(h) => {
            if n == 0 {
                let mu = draw_mvn(h.m, &h.c, rng)?;
                let sigma = draw_inv_wishart(&h.iw_scale, h.iw_df, rng)?;
                return Ok(ComponentParams::MvGaussian { mu, sigma });
            }
            let sigma = match current {
                ComponentParams::MvGaussian { sigma, .. } => *sigma,
                _ => draw_inv_wishart(&h.iw_scale, h.iw_df, rng)?,
            };
            let c_inv = inv2(&h.c);
            let s_inv = inv2(&sigma);
            let mut sum = [0.0; 2];
            for row in ys.chunks_exact(2) {
                sum[0] += row[0];
                sum[1] += row[1];
            }
            let precision = add2(&c_inv, &scale2(&s_inv, nf));
            let cov = inv2(&precision);
            let rhs = add_vec(mat_vec(&c_inv, h.m), mat_vec(&s_inv, sum));
            let mean = mat_vec(&cov, rhs);
            let mu = draw_mvn(mean, &cov, rng)?;
            let mut scatter = h.iw_scale;
            for row in ys.chunks_exact(2) {
                let d = [row[0] - mu[0], row[1] - mu[1]];
                scatter[0][0] += d[0] * d[0];
                scatter[0][1] += d[0] * d[1];
                scatter[1][1] += d[1] * d[1];
            }
            scatter[1][0] = scatter[0][1];
            let sigma = draw_inv_wishart(&scatter, h.iw_df + nf, rng)?;
            Ok(ComponentParams::MvGaussian { mu, sigma })
        }
        ModelHyper::FixedVar => {
            let sum: f64 = ys.iter().sum();
            let precision = 1.0 + nf;
            let theta = sum / precision + sample_std_normal(rng) / precision.sqrt();
            Ok(ComponentParams::FixedVar { theta })
        }
        ModelHyper::Null => Ok(ComponentParams::Null),
    }
}

/// `ln m(y_A)` for the fixed-variance model, `y_i ~ N(θ, 1)`, `θ ~ N(0, 1)`:
/// `ln[(|A|+1)^{-1/2} · Π N(y_i|0,1) · exp((Σy)² / (2(|A|+1)))]`.
/// Sums are taken over sorted values so the result is exactly
/// permutation-invariant.
pub fn log_marginal_fixed_variance(ys: &[f64]) -> Result<f64> {
    if ys.is_empty() {
        return Err(Error::domain("marginal likelihood of an empty block"));
    }
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sum: f64 = sorted.iter().sum();
    let sq: f64 = sorted.iter().map(|y| y * y).sum();
    Ok(-0.5 * n * LN_2PI - 0.5 * sq - 0.5 * (n + 1.0).ln() + sum * sum / (2.0 * (n + 1.0)))
}

/// Which components' variances inform the `γ` hyperprior update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaUpdate {
    /// All truncated components; empty ones carry prior draws.
    #[default]
    All,
    Occupied,
    Disabled,
}

/// Conjugate draw `γ ~ Gamma(g + a_σ·M, h + Σ 1/σ²_k)` over the given
/// variances; leaves `γ` unchanged when none are given.
pub fn update_gamma_hyper(hyper: &mut GaussianHyper, sigma2: &[f64], rng: &mut RandomSource) -> Result<()> {
    if sigma2.is_empty() {
        return Ok(());
    }
    let shape = hyper.g + hyper.a_sigma * sigma2.len() as f64;
    let rate = hyper.h + sigma2.iter().map(|s| 1.0 / s).sum::<f64>();
    hyper.gamma = sample_gamma(shape, rate, rng)?;
    Ok(())
}

fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inv2(m: &Mat2) -> Mat2 {
    let d = det2(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

fn add2(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

fn scale2(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

fn mat_vec(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn add_vec(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

/// Lower Cholesky factor, or `None` if not positive definite.
fn chol2(m: &Mat2) -> Option<Mat2> {
    if !(m[0][0] > 0.0) {
        return None;
    }
    let l00 = m[0][0].sqrt();
    let l10 = m[1][0] / l00;
    let rest = m[1][1] - l10 * l10;
    if !(rest > 1e-12 * m[1][1]) || !rest.is_finite() {
        return None;
    }
    Some([[l00, 0.0], [l10, rest.sqrt()]])
}

fn draw_mvn(mean: [f64; 2], cov: &Mat2, rng: &mut RandomSource) -> Result<[f64; 2]> {
    let l = chol2(cov).ok_or_else(|| Error::numeric("draw_mvn", format!("covariance {cov:?} not positive definite")))?;
    let z = [sample_std_normal(rng), sample_std_normal(rng)];
    Ok([mean[0] + l[0][0] * z[0], mean[1] + l[1][0] * z[0] + l[1][1] * z[1]])
}

/// `Σ ~ IW(Ψ, ν)` by inverting a Bartlett-decomposition draw of
/// `Σ⁻¹ ~ Wishart(ν, Ψ⁻¹)`. Requires `ν > 1`.
fn draw_inv_wishart(scale: &Mat2, df: f64, rng: &mut RandomSource) -> Result<Mat2> {
    if !(df > 1.0) {
        return Err(Error::domain(format!("inverse-Wishart df must exceed 1, got {df}")));
    }
    let l = chol2(&inv2(scale))
        .ok_or_else(|| Error::numeric("draw_inv_wishart", format!("scale {scale:?} not positive definite")))?;
    // χ²_k = 2·Gamma(k/2, 1)
    let a00 = (2.0 * sample_gamma(0.5 * df, 1.0, rng)?).sqrt();
    let a11 = (2.0 * sample_gamma(0.5 * (df - 1.0), 1.0, rng)?).sqrt();
    let a10 = sample_std_normal(rng);
    // B = L·A, W = B·Bᵀ
    let b = [[l[0][0] * a00, 0.0], [l[1][0] * a00 + l[1][1] * a10, l[1][1] * a11]];
    let w00 = b[0][0] * b[0][0];
    let w01 = b[0][0] * b[1][0];
    let w11 = b[1][0] * b[1][0] + b[1][1] * b[1][1];
    let w = [[w00, w01], [w01, w11]];
    let sigma = inv2(&w);
    if chol2(&sigma).is_none() {
        return Err(Error::numeric("draw_inv_wishart", format!("degenerate draw {sigma:?}")));
    }
    Ok(sigma)
}

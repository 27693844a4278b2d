//! Synthetic data, experiment configuration and orchestration.
//!
//! Configuration files are TOML. An experiment generates (or loads) data
//! for each sample size, calibrates DP/PY baselines against the QB prior
//! when their parameters are left out, runs every (sample size, prior,
//! chain) cell in parallel and writes:
//!
//! * `data_n{n}.csv`: observations and generating labels;
//! * `posterior_T.csv`: `prior,n,t,probability`;
//! * `traces/`: per-chain `iteration,T` CSVs (and NDJSON assignments if enabled);
//! * `calibration.json` / `calibration.csv` when calibration ran;
//! * `config.toml` (the resolved configuration) and `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, write_calibration_csv, CalibrationReport, CALIBRATION_TRUNCATION};
use crate::components::{Dataset, GammaUpdate, ModelKind};
use crate::eppf::{dp_prob_new_cluster_closed_form, prob_new_cluster, Partition};
use crate::error::{Error, Result};
use crate::numerics::{sample_std_normal, RandomSource};
use crate::priors::{DpParams, Prior, PyParams, QbParams, DEFAULT_TRUNCATION};
use crate::sampler::{exact_posterior_t, run_chain, PosteriorSummary, RunConfig, TraceOptions};

const DATA_STREAM: u64 = 0xDA7A_0000;
const CALIBRATION_STREAM: u64 = 0xCA11;
const CHAIN_STREAM: u64 = 0x1_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Gauss1d,
    Laplace1d,
    Gauss2d,
    Custom,
}

impl Scenario {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "gauss1d" => Ok(Self::Gauss1d),
            "laplace1d" => Ok(Self::Laplace1d),
            "gauss2d" => Ok(Self::Gauss2d),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected gauss1d, laplace1d, gauss2d or custom)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gauss1d => "gauss1d",
            Self::Laplace1d => "laplace1d",
            Self::Gauss2d => "gauss2d",
            Self::Custom => "custom",
        }
    }

    /// Observation model fitted to this scenario by default.
    pub fn default_model(self) -> Option<ModelKind> {
        match self {
            Self::Gauss1d => Some(ModelKind::Gaussian),
            Self::Laplace1d => Some(ModelKind::Laplace),
            Self::Gauss2d => Some(ModelKind::MvGaussian),
            Self::Custom => None,
        }
    }
}

/// Observations together with the mixture component that generated each.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub scenario: Scenario,
    pub data: Dataset,
    pub labels: Vec<usize>,
    pub seed: u64,
}

/// Draws `n` points from the scenario's three-component mixture:
/// * gauss1d: `0.3 N(-4,1) + 0.3 N(0,1) + 0.4 N(5,1)`;
/// * laplace1d: `0.35 Lap(-10,1) + 0.3 Lap(0,1.5) + 0.35 Lap(10,0.5)`;
/// * gauss2d: `0.3 N((-4,1),I) + 0.3 N((0,2),I) + 0.4 N((5,3),I)`.
pub fn generate_dataset(scenario: Scenario, n: usize, seed: u64) -> Result<SyntheticDataset> {
    let mut rng = RandomSource::new(seed, DATA_STREAM + n as u64);
    let weights: &[f64] = match scenario {
        Scenario::Gauss1d | Scenario::Gauss2d => &[0.3, 0.3, 0.4],
        Scenario::Laplace1d => &[0.35, 0.3, 0.35],
        Scenario::Custom => {
            return Err(Error::Config(
                "the custom scenario has no generator; set data_file".into(),
            ))
        }
    };
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let u = rng.uniform();
        let label = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        labels.push(label);
        match scenario {
            Scenario::Gauss1d => values.push([-4.0, 0.0, 5.0][label] + sample_std_normal(&mut rng)),
            Scenario::Laplace1d => {
                let (loc, scale) = [(-10.0, 1.0), (0.0, 1.5), (10.0, 0.5)][label];
                let e = -rng.uniform().ln();
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                values.push(loc + sign * scale * e);
            }
            Scenario::Gauss2d => {
                let mean = [[-4.0, 1.0], [0.0, 2.0], [5.0, 3.0]][label];
                values.push(mean[0] + sample_std_normal(&mut rng));
                values.push(mean[1] + sample_std_normal(&mut rng));
            }
            Scenario::Custom => unreachable!(),
        }
    }
    let dim = if scenario == Scenario::Gauss2d { 2 } else { 1 };
    Ok(SyntheticDataset {
        scenario,
        data: Dataset::new(dim, values)?,
        labels,
        seed,
    })
}

/// Writes observations as CSV with header `y,label` (or `y1,y2,label`).
pub fn write_dataset<W: std::io::Write>(dataset: &SyntheticDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = dataset.data.dim();
    let mut header: Vec<String> = if dim == 1 {
        vec!["y".into()]
    } else {
        (1..=dim).map(|j| format!("y{j}")).collect()
    };
    header.push("label".into());
    w.write_record(&header).map_err(Error::write)?;
    for (row, label) in dataset.data.rows().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(Error::write)?;
    }
    w.flush().map_err(Error::write)
}

pub fn write_dataset_csv(path: &Path, dataset: &SyntheticDataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(dataset, std::io::BufWriter::new(file))
}

/// Reads observations from a CSV file with a header row. Columns named
/// `label` are ignored; every other column is a coordinate.
pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_parse(path, e))?;
    let headers = r.headers().map_err(|e| csv_parse(path, e))?.clone();
    let columns: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "label")
        .map(|(i, _)| i)
        .collect();
    if columns.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "no observation columns".into(),
        });
    }
    let mut values = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_parse(path, e))?;
        for &c in &columns {
            let field = record.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: '{field}' is not a number", line + 2),
            })?;
            values.push(v);
        }
    }
    Dataset::new(columns.len(), values)
}

fn csv_parse(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// A prior entry in an experiment config. Omitted DP/PY parameters are
/// calibrated against the first QB entry; an omitted QB `epsilon` uses
/// `n^{-2.1}` for each sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    Qb {
        p: f64,
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Dp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Py {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        discount: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

impl PriorSpec {
    pub fn label(&self) -> String {
        match self {
            PriorSpec::Qb { label, .. } => label.clone().unwrap_or_else(|| "QB".into()),
            PriorSpec::Dp { label, .. } => label.clone().unwrap_or_else(|| "DP".into()),
            PriorSpec::Py { label, .. } => label.clone().unwrap_or_else(|| "PY".into()),
        }
    }

    fn needs_calibration(&self) -> bool {
        match self {
            PriorSpec::Qb { .. } => false,
            PriorSpec::Dp { alpha, .. } => alpha.is_none(),
            PriorSpec::Py { alpha, discount, .. } => alpha.is_none() || discount.is_none(),
        }
    }

    fn resolve(&self, n: usize, truncation: usize, calibration: Option<&CalibrationReport>) -> Result<Prior> {
        let calibrated = || {
            calibration.ok_or_else(|| Error::Config("calibration requested but no QB prior to match".into()))
        };
        Ok(match self {
            PriorSpec::Qb { p, alpha, epsilon, .. } => {
                let eps = epsilon.unwrap_or_else(|| (n as f64).powf(-2.1));
                Prior::Qb(QbParams::new(*p, *alpha, eps, truncation)?)
            }
            PriorSpec::Dp { alpha, .. } => {
                let a = match alpha {
                    Some(a) => *a,
                    None => calibrated()?.dp.alpha,
                };
                Prior::Dp(DpParams::new(a, truncation)?)
            }
            PriorSpec::Py { alpha, discount, .. } => {
                let (a, d) = match (alpha, discount) {
                    (Some(a), Some(d)) => (*a, *d),
                    _ => {
                        let c = calibrated()?;
                        (c.py.alpha, c.py.discount)
                    }
                };
                Prior::Py(PyParams::new(a, d, truncation)?)
            }
        })
    }
}

fn default_iterations() -> usize {
    10_000
}
fn default_burn_in() -> usize {
    2_000
}
fn default_thinning() -> usize {
    10
}
fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_calibration_samples() -> usize {
    200_000
}
fn default_calibration_truncation() -> usize {
    CALIBRATION_TRUNCATION
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_true")]
    pub swap_move: bool,
    #[serde(default = "default_one")]
    pub swaps_per_iteration: usize,
    #[serde(default)]
    pub gamma_update: GammaUpdate,
    #[serde(default)]
    pub write_partitions: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            thinning: default_thinning(),
            truncation: default_truncation(),
            swap_move: true,
            swaps_per_iteration: 1,
            gamma_update: GammaUpdate::All,
            write_partitions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    #[serde(default = "default_calibration_samples")]
    pub samples: usize,
    #[serde(default = "default_calibration_truncation")]
    pub truncation: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            samples: default_calibration_samples(),
            truncation: default_calibration_truncation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_one")]
    pub chains: usize,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    pub priors: Vec<PriorSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn model(&self) -> Result<ModelKind> {
        self.model
            .or(self.scenario.default_model())
            .ok_or_else(|| Error::Config("the custom scenario needs an explicit model".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if self.scenario == Scenario::Custom {
            if self.data_file.is_none() {
                return Err(Error::Config("the custom scenario needs data_file".into()));
            }
        } else if self.sample_sizes.is_empty() {
            return Err(Error::Config("sample_sizes must list at least one n".into()));
        }
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("sample size {n} is below 2")));
        }
        if self.priors.is_empty() {
            return Err(Error::Config("at least one prior is required".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        let mut labels: Vec<String> = self.priors.iter().map(PriorSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("prior labels must be distinct".into()));
        }
        let wants_calibration = self.priors.iter().any(PriorSpec::needs_calibration);
        if wants_calibration && !self.priors.iter().any(|p| matches!(p, PriorSpec::Qb { .. })) {
            return Err(Error::Config(
                "DP/PY parameters may only be omitted when a QB prior is present".into(),
            ));
        }
        if self.sampler.burn_in >= self.sampler.iterations || self.sampler.thinning == 0 {
            return Err(Error::Config(
                "sampler needs burn_in < iterations and thinning >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One chain's result within an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub label: String,
    pub n: usize,
    pub chain: usize,
    pub stream: u64,
    pub prior: Prior,
    pub summary: PosteriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
    pub calibration: Vec<CalibrationReport>,
}

impl ExperimentOutcome {
    /// Pooled `Pr(T = t | y)` for one prior label and sample size.
    pub fn t_probabilities(&self, label: &str, n: usize) -> Option<Vec<f64>> {
        let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.label == label && c.n == n).collect();
        if cells.is_empty() {
            return None;
        }
        let mut hist = vec![0u64; n + 1];
        for c in &cells {
            for (a, b) in hist.iter_mut().zip(&c.summary.t_histogram) {
                *a += b;
            }
        }
        let total: u64 = hist.iter().sum();
        Some(hist.iter().map(|&h| h as f64 / total as f64).collect())
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    scenario: &'static str,
    seed: u64,
    sample_sizes: Vec<usize>,
    threads: usize,
    wall_clock_seconds: f64,
    cells: Vec<ManifestCell<'a>>,
}

#[derive(Serialize)]
struct ManifestCell<'a> {
    label: &'a str,
    n: usize,
    chain: usize,
    seed: u64,
    stream: u64,
    prior: &'a Prior,
    kept: usize,
    swap_acceptance_rate: f64,
    seconds_per_iteration: f64,
    final_word_pos: String,
}

/// Runs every cell of the experiment and writes its artifact bundle to
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let start = Instant::now();
    let out = &config.output_dir;
    let traces = out.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    let model = config.model()?;

    // data per sample size
    let mut datasets: Vec<(usize, Dataset)> = Vec::new();
    if config.scenario == Scenario::Custom {
        let path = config.data_file.as_ref().expect("validated");
        let data = load_dataset_csv(path)?;
        datasets.push((data.len(), data));
    } else {
        for &n in &config.sample_sizes {
            let synthetic = generate_dataset(config.scenario, n, config.seed)?;
            write_dataset_csv(&out.join(format!("data_n{n}.csv")), &synthetic)?;
            datasets.push((n, synthetic.data));
        }
    }

    // calibration against the first QB entry
    let qb_spec = config.priors.iter().find(|p| matches!(p, PriorSpec::Qb { .. }));
    let mut calibration = Vec::new();
    if config.priors.iter().any(PriorSpec::needs_calibration) {
        let qb_spec = qb_spec.expect("validated");
        for (i, (n, _)) in datasets.iter().enumerate() {
            let Prior::Qb(qb) = qb_spec.resolve(*n, config.calibration.truncation, None)? else {
                unreachable!()
            };
            let rng = RandomSource::new(config.seed, CALIBRATION_STREAM + i as u64);
            calibration.push(calibrate(&qb, *n, config.calibration.samples, &rng)?);
        }
        let json = serde_json::to_string_pretty(&calibration)
            .map_err(|e| Error::Config(format!("cannot serialize calibration: {e}")))?;
        let path = out.join("calibration.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = out.join("calibration.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_calibration_csv(&calibration, file)?;
    }

    // cells
    struct Cell {
        label: String,
        n: usize,
        data_index: usize,
        chain: usize,
        prior: Prior,
        stream: u64,
    }
    let mut cells = Vec::new();
    for (i, (n, _)) in datasets.iter().enumerate() {
        let report = calibration.get(i);
        for spec in &config.priors {
            let prior = spec.resolve(*n, config.sampler.truncation, report)?;
            for chain in 0..config.chains {
                let stream = CHAIN_STREAM + cells.len() as u64;
                cells.push(Cell {
                    label: spec.label(),
                    n: *n,
                    data_index: i,
                    chain,
                    prior,
                    stream,
                });
            }
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            let s = &config.sampler;
            let stem = format!("{}_n{}_chain{}", sanitize(&cell.label), cell.n, cell.chain);
            let run = RunConfig {
                iterations: s.iterations,
                burn_in: s.burn_in,
                thinning: s.thinning,
                seed: config.seed,
                stream: cell.stream,
                prior: cell.prior,
                model,
                swap_move: s.swap_move,
                swaps_per_iteration: s.swaps_per_iteration,
                gamma_update: s.gamma_update,
                trace: TraceOptions {
                    t_csv: Some(traces.join(format!("T_{stem}.csv"))),
                    partitions_ndjson: s
                        .write_partitions
                        .then(|| traces.join(format!("assignments_{stem}.ndjson"))),
                },
            };
            let mut rng = RandomSource::new(config.seed, cell.stream);
            let summary = run_chain(&run, &datasets[cell.data_index].1, &mut rng)?;
            Ok(CellResult {
                label: cell.label.clone(),
                n: cell.n,
                chain: cell.chain,
                stream: cell.stream,
                prior: cell.prior,
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let outcome = ExperimentOutcome {
        cells: results,
        calibration,
    };

    // posterior of T
    let path = out.join("posterior_T.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    w.write_record(["prior", "n", "t", "probability"]).map_err(|e| csv_io(&path, e))?;
    for (n, _) in &datasets {
        for spec in &config.priors {
            let label = spec.label();
            let probs = outcome.t_probabilities(&label, *n).expect("cell ran");
            let t_max = (*n).min(config.sampler.truncation);
            for (t, p) in probs.iter().enumerate().take(t_max + 1).skip(1) {
                w.write_record([label.clone(), n.to_string(), t.to_string(), format!("{p:.6}")])
                    .map_err(|e| csv_io(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("config.toml");
    fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;

    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        scenario: config.scenario.name(),
        seed: config.seed,
        sample_sizes: datasets.iter().map(|(n, _)| *n).collect(),
        threads: rayon::current_num_threads(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        cells: outcome
            .cells
            .iter()
            .map(|c| ManifestCell {
                label: &c.label,
                n: c.n,
                chain: c.chain,
                seed: c.summary.seed,
                stream: c.stream,
                prior: &c.prior,
                kept: c.summary.kept(),
                swap_acceptance_rate: c.summary.swap_acceptance_rate(),
                seconds_per_iteration: c.summary.seconds_per_iteration,
                final_word_pos: c.summary.final_word_pos.to_string(),
            })
            .collect(),
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(outcome)
}

/// Moment matching of DP/PY against a QB prior over several sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStudy {
    pub p: f64,
    pub alpha: f64,
    /// Fixed QB epsilon; `n^{-2.1}` per sample size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub sample_sizes: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_calibration_samples")]
    pub samples: usize,
    #[serde(default = "default_calibration_truncation")]
    pub truncation: usize,
}

impl CalibrationStudy {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn run(&self) -> Result<Vec<CalibrationReport>> {
        if self.sample_sizes.is_empty() {
            return Err(Error::Config("sample_sizes must list at least one n".into()));
        }
        let spec = PriorSpec::Qb {
            p: self.p,
            alpha: self.alpha,
            epsilon: self.epsilon,
            label: None,
        };
        self.sample_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let Prior::Qb(qb) = spec.resolve(n, self.truncation, None)? else {
                    unreachable!()
                };
                let rng = RandomSource::new(self.seed, CALIBRATION_STREAM + i as u64);
                calibrate(&qb, n, self.samples, &rng)
            })
            .collect()
    }
}

fn default_existing() -> Vec<usize> {
    vec![50, 50]
}
fn default_max_m() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub label: String,
    pub prior: Prior,
}

/// Prior probability of opening new clusters when `m` more points join a
/// partition with the given block sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCurvesConfig {
    #[serde(default = "default_existing")]
    pub existing: Vec<usize>,
    #[serde(default = "default_max_m")]
    pub max_m: usize,
    pub curves: Vec<CurveSpec>,
}

impl PriorCurvesConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub prior: String,
    pub m: usize,
    pub prob_new_cluster: f64,
    /// Closed-form value, DP curves only.
    pub dp_closed_form: Option<f64>,
}

pub fn prior_curves(config: &PriorCurvesConfig) -> Result<Vec<CurvePoint>> {
    let existing = Partition::new(config.existing.clone())?;
    let mut points = Vec::new();
    for curve in &config.curves {
        curve.prior.validate()?;
        for m in 1..=config.max_m {
            let prob = prob_new_cluster(&curve.prior, &existing, m)?;
            let closed = match curve.prior {
                Prior::Dp(d) => Some(dp_prob_new_cluster_closed_form(existing.n(), d.alpha, m)),
                _ => None,
            };
            points.push(CurvePoint {
                prior: curve.label.clone(),
                m,
                prob_new_cluster: prob,
                dp_closed_form: closed,
            });
        }
    }
    Ok(points)
}

/// CSV `prior,m,prob_new_cluster,dp_closed_form` (the last column is empty
/// for non-DP curves).
pub fn write_prior_curves_csv<W: std::io::Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = Error::write;
    w.write_record(["prior", "m", "prob_new_cluster", "dp_closed_form"]).map_err(err)?;
    for p in points {
        w.write_record([
            p.prior.clone(),
            p.m.to_string(),
            format!("{:.15e}", p.prob_new_cluster),
            p.dp_closed_form.map(|v| format!("{v:.15e}")).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(Error::write)
}

/// Small-sample exact posterior of `T` under the fixed-variance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPosteriorConfig {
    pub data: Vec<f64>,
    pub prior: Prior,
}

impl ExactPosteriorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPosteriorReport {
    pub n: usize,
    pub prior: Prior,
    /// `probabilities[t - 1] = Pr(T = t | y)`.
    pub probabilities: Vec<f64>,
    pub mode: usize,
}

pub fn run_exact_posterior(config: &ExactPosteriorConfig) -> Result<ExactPosteriorReport> {
    let probabilities = exact_posterior_t(&config.data, &config.prior)?;
    let mode = 1 + probabilities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    Ok(ExactPosteriorReport {
        n: config.data.len(),
        prior: config.prior,
        probabilities,
        mode,
    })
}

/// Outcome of one quick invariant check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast invariant checks: EPPF normalization and reductions, the TV bound,
/// incomplete-beta identities and the DP predictive closed form.
pub fn selftest() -> Vec<CheckResult> {
    use crate::eppf::{log_eppf_dp, log_eppf_py, log_eppf_qb, size_profiles, tv_bound, tv_distance_small_n};
    use crate::numerics::log_reg_inc_beta;

    let mut out = Vec::new();
    let mut check = |name: &'static str, f: &dyn Fn() -> Result<(bool, String)>| {
        let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckResult { name, passed, detail });
    };

    check("eppf normalization", &|| {
        let mut worst: f64 = 0.0;
        for n in 2..=5 {
            for (p, a, e) in [(0.5, 0.5, 0.0), (0.9, 1.0, 0.01), (0.9, 2.0, 0.3), (0.5, 1.0, 1.0)] {
                let total: f64 = size_profiles(n)
                    .iter()
                    .map(|(part, c)| Ok(c * log_eppf_qb(part, p, a, e)?.exp()))
                    .sum::<Result<f64>>()?;
                worst = worst.max((total - 1.0).abs());
            }
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
    });
    check("reductions", &|| {
        let mut worst: f64 = 0.0;
        for (part, _) in size_profiles(6) {
            let dp = log_eppf_dp(&part, 0.8)?;
            worst = worst.max((log_eppf_qb(&part, 0.9, 0.8, 1.0)? - dp).abs());
            worst = worst.max((log_eppf_py(&part, 0.8, 0.0)? - dp).abs());
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
    });
    check("tv bound", &|| {
        let tv = tv_distance_small_n(6, 0.9, 1.0, 1.0 / 6.0)?;
        let bound = tv_bound(6, 1.0, 1.0 / 6.0);
        Ok((tv <= bound.value, format!("tv {tv:.4} <= bound {:.4}", bound.value)))
    });
    check("incomplete beta", &|| {
        let mut worst: f64 = 0.0;
        for k in 0..12 {
            let eps = 10f64.powi(-k);
            let got = log_reg_inc_beta(eps, 1.3, 1.0)?;
            worst = worst.max((got - 1.3 * eps.ln()).abs() / (1.3 * eps.ln()).abs().max(1.0));
        }
        Ok((worst < 1e-12, format!("max relative deviation {worst:.2e}")))
    });
    check("dp predictive", &|| {
        let dp = Prior::Dp(DpParams::new(1.0, 50)?);
        let existing = Partition::new(vec![50, 50])?;
        let mut worst: f64 = 0.0;
        for m in 1..=50 {
            let a = prob_new_cluster(&dp, &existing, m)?;
            worst = worst.max((a - dp_prob_new_cluster_closed_form(100, 1.0, m)).abs());
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::mean_se;

    #[test]
    fn gauss1d_mixture() {
        let d = generate_dataset(Scenario::Gauss1d, 1_000_000, 5).unwrap();
        let n = d.labels.len() as f64;
        for (k, (w, mu)) in [(0.3, -4.0), (0.3, 0.0), (0.4, 5.0)].into_iter().enumerate() {
            let ys: Vec<f64> = d
                .data
                .values()
                .iter()
                .zip(&d.labels)
                .filter(|(_, &l)| l == k)
                .map(|(y, _)| *y)
                .collect();
            let freq = ys.len() as f64 / n;
            assert!((freq - w).abs() < 3.0 * (w * (1.0 - w) / n).sqrt(), "{k}: {freq}");
            let (m, _) = mean_se(&ys);
            assert!((m - mu).abs() < 0.01, "{k}: {m}");
        }
    }

    #[test]
    fn laplace_middle_scale() {
        let d = generate_dataset(Scenario::Laplace1d, 1_000_000, 6).unwrap();
        let ys: Vec<f64> = d
            .data
            .values()
            .iter()
            .zip(&d.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(y, _)| *y)
            .collect();
        let mad = ys.iter().map(|y| y.abs()).sum::<f64>() / ys.len() as f64;
        assert!((mad - 1.5).abs() < 0.01, "{mad}");
    }

    #[test]
    fn gauss2d_means() {
        let d = generate_dataset(Scenario::Gauss2d, 200_000, 7).unwrap();
        assert_eq!(d.data.dim(), 2);
        let mut sums = [[0.0; 3]; 3];
        for (row, &l) in d.data.rows().zip(&d.labels) {
            sums[l][0] += row[0];
            sums[l][1] += row[1];
            sums[l][2] += 1.0;
        }
        for (k, mean) in [[-4.0, 1.0], [0.0, 2.0], [5.0, 3.0]].iter().enumerate() {
            assert!((sums[k][0] / sums[k][2] - mean[0]).abs() < 0.02);
            assert!((sums[k][1] / sums[k][2] - mean[1]).abs() < 0.02);
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        let a = generate_dataset(Scenario::Laplace1d, 100, 9).unwrap();
        let b = generate_dataset(Scenario::Laplace1d, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(generate_dataset(Scenario::Custom, 10, 1).is_err());
        assert!(Scenario::parse("gauss3d").is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(Scenario::Gauss2d, 50, 3).unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&path, &d).unwrap();
        let back = load_dataset_csv(&path).unwrap();
        assert_eq!(back, d.data);
    }

    #[test]
    fn config_parsing_and_errors() {
        let text = r#"
            scenario = "gauss1d"
            sample_sizes = [50]
            seed = 4
            [[priors]]
            kind = "qb"
            p = 0.9
            alpha = 1.0
            [[priors]]
            kind = "dp"
        "#;
        let c = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.sampler.iterations, 10_000);
        assert_eq!(c.model().unwrap(), ModelKind::Gaussian);
        let echoed = ExperimentConfig::from_toml(&c.to_toml().unwrap(), Path::new("y.toml")).unwrap();
        assert_eq!(echoed, c);

        let bad = "scenario = \"gauss1d\"\nseed = 1\nsample_sizes = [50]\n[[priors]]\nkind = \"dp\"\n";
        assert!(matches!(ExperimentConfig::from_toml(bad, Path::new("b.toml")), Err(Error::Config(_))));
        let broken = "scenario = \"gauss9\"\nseed = 1\n";
        let err = ExperimentConfig::from_toml(broken, Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn small_experiment_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
            scenario = "gauss1d"
            sample_sizes = [40]
            seed = 12
            output_dir = "{}"
            [sampler]
            iterations = 300
            burn_in = 100
            thinning = 2
            truncation = 20
            [calibration]
            samples = 4000
            [[priors]]
            kind = "qb"
            p = 0.9
            alpha = 1.0
            [[priors]]
            kind = "dp"
            [[priors]]
            kind = "py"
            "#,
            dir.path().display()
        );
        let config = ExperimentConfig::from_toml(&text, Path::new("mem.toml")).unwrap();
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.cells.len(), 3);
        assert_eq!(outcome.calibration.len(), 1);
        let posterior = fs::read(dir.path().join("posterior_T.csv")).unwrap();
        let text = String::from_utf8(posterior.clone()).unwrap();
        assert!(text.starts_with("prior,n,t,probability\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 20);
        for name in ["manifest.json", "config.toml", "calibration.json", "calibration.csv", "data_n40.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert!(dir.path().join("traces/T_QB_n40_chain0.csv").exists());
        // rerun: identical CSV bytes
        run_experiment(&config).unwrap();
        assert_eq!(fs::read(dir.path().join("posterior_T.csv")).unwrap(), posterior);
    }

    #[test]
    fn new_cluster_curves_against_closed_form() {
        let config = PriorCurvesConfig {
            existing: vec![50, 50],
            max_m: 50,
            curves: vec![
                CurveSpec {
                    label: "DP".into(),
                    prior: Prior::Dp(DpParams::new(1.0, 50).unwrap()),
                },
                CurveSpec {
                    label: "QB".into(),
                    prior: Prior::Qb(QbParams::new(0.9, 1.0, 1e-4, 50).unwrap()),
                },
            ],
        };
        let points = prior_curves(&config).unwrap();
        assert_eq!(points.len(), 100);
        for m in 0..50 {
            let dp = &points[m];
            let qb = &points[50 + m];
            assert!((dp.prob_new_cluster - dp.dp_closed_form.unwrap()).abs() < 1e-10);
            assert!(qb.prob_new_cluster < dp.prob_new_cluster);
        }
        let mut buf = Vec::new();
        write_prior_curves_csv(&points, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("prior,m,prob_new_cluster,dp_closed_form\n"));
    }

    #[test]
    fn selftest_passes() {
        for r in selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

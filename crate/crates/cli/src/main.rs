use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbstick::calibration::write_calibration_csv;
use qbstick::experiments::{
    generate_dataset, prior_curves, run_exact_posterior, run_experiment, selftest, write_dataset,
    write_dataset_csv, CalibrationStudy, ExactPosteriorConfig, ExperimentConfig, PriorCurvesConfig, Scenario,
};

/// Quasi-Bernoulli stick-breaking mixtures: data generation, calibration and fitting.
#[derive(Debug, Parser)]
#[command(name = "qbstick", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (stdout when a file is expected and this is absent).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    Generate {
        /// gauss1d, laplace1d or gauss2d.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Match DP and PY prior moments of the cluster count to a QB prior.
    Calibrate,
    /// Run an experiment: data, calibration, chains and the artifact bundle.
    Fit,
    /// Probability of opening new clusters as future points arrive.
    PriorCurves,
    /// Exact posterior of the cluster count by enumerating partitions.
    ExactPosterior,
    /// Run the fast invariant checks.
    Selftest,
}

enum Failure {
    Usage(String),
    Runtime(qbstick::Error),
    Checks(String),
}

impl From<qbstick::Error> for Failure {
    fn from(e: qbstick::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Runtime(qbstick::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with status 0; usage errors exit 2
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Checks(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Generate { scenario, n } => generate(&cli, scenario.as_deref(), *n),
        Command::Calibrate => calibrate(&cli),
        Command::Fit => fit(&cli),
        Command::PriorCurves => curves(&cli),
        Command::ExactPosterior => exact(&cli),
        Command::Selftest => check(),
    }
}

/// The config path, which must name an existing file.
fn config_path<'a>(cli: &'a Cli, command: &str) -> Result<&'a Path, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("'{command}' requires --config <PATH>")))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
    }
    Ok(path)
}

/// Writes to `--out` if given, else stdout.
fn emit(cli: &Cli, write: impl FnOnce(&mut dyn Write) -> Result<(), Failure>) -> Result<(), Failure> {
    match &cli.out {
        Some(path) => {
            let mut file = io::BufWriter::new(fs::File::create(path).map_err(|e| io_failure(path, e))?);
            write(&mut file)?;
            file.flush().map_err(|e| io_failure(path, e))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

fn generate(cli: &Cli, scenario: Option<&str>, n: Option<usize>) -> Result<(), Failure> {
    if cli.config.is_some() {
        let path = config_path(cli, "generate")?;
        let mut config = ExperimentConfig::load(path)?;
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        let dir = cli.out.clone().unwrap_or(config.output_dir.clone());
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for &n in &config.sample_sizes {
            let dataset = generate_dataset(config.scenario, n, config.seed)?;
            write_dataset_csv(&dir.join(format!("data_n{n}.csv")), &dataset)?;
        }
        return Ok(());
    }
    let (Some(tag), Some(n)) = (scenario, n) else {
        return Err(Failure::Usage("generate needs --config or both --scenario and --n".into()));
    };
    let scenario = Scenario::parse(tag).map_err(|e| Failure::Usage(e.to_string()))?;
    if scenario == Scenario::Custom {
        return Err(Failure::Usage("the custom scenario has no generator".into()));
    }
    let dataset = generate_dataset(scenario, n, cli.seed.unwrap_or(1))?;
    emit(cli, |w| Ok(write_dataset(&dataset, w)?))
}

fn calibrate(cli: &Cli) -> Result<(), Failure> {
    let mut study = CalibrationStudy::load(config_path(cli, "calibrate")?)?;
    if let Some(seed) = cli.seed {
        study.seed = seed;
    }
    let reports = study.run()?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            let path = dir.join("calibration.json");
            fs::write(&path, json).map_err(|e| io_failure(&path, e))?;
            let path = dir.join("calibration.csv");
            let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
            write_calibration_csv(&reports, file)?;
        }
        None => {
            println!("{json}");
            write_calibration_csv(&reports, io::stdout().lock())?;
        }
    }
    Ok(())
}

fn fit(cli: &Cli) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(config_path(cli, "fit")?)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let outcome = run_experiment(&config)?;
    for cell in &outcome.cells {
        eprintln!(
            "{} n={} chain={}: mode T = {}, swap acceptance {:.3}",
            cell.label,
            cell.n,
            cell.chain,
            cell.summary.t_mode(),
            cell.summary.swap_acceptance_rate()
        );
    }
    Ok(())
}

fn curves(cli: &Cli) -> Result<(), Failure> {
    let config = PriorCurvesConfig::load(config_path(cli, "prior-curves")?)?;
    let points = prior_curves(&config)?;
    emit(cli, |w| Ok(qbstick::experiments::write_prior_curves_csv(&points, w)?))
}

fn exact(cli: &Cli) -> Result<(), Failure> {
    let config = ExactPosteriorConfig::load(config_path(cli, "exact-posterior")?)?;
    let report = run_exact_posterior(&config)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(cli, |w| writeln!(w, "{json}").map_err(|e| io_failure(Path::new("<stdout>"), e)))
}

fn check() -> Result<(), Failure> {
    let results = selftest();
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Checks(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

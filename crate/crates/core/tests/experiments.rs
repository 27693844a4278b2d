use qbstick::calibration::calibrate_dp;
use qbstick::components::ModelKind;
use qbstick::experiments::{generate_dataset, run_experiment, ExperimentConfig, Scenario};
use qbstick::sampler::{run_chain, RunConfig};
use qbstick::{DpParams, Prior, QbParams, RandomSource};

#[test]
fn dp_keeps_more_mass_on_extra_clusters_than_qb() {
    let n = 500;
    let seed = 77;
    let data = generate_dataset(Scenario::Gauss1d, n, seed).unwrap().data;
    let qb = Prior::Qb(QbParams::with_sample_size_epsilon(0.9, 1.0, n, 50).unwrap());
    // match the DP prior mean of T to the QB value for this n
    let dp = Prior::Dp(DpParams::new(calibrate_dp(4.94, n).unwrap(), 50).unwrap());
    let run = |prior: Prior, stream: u64| {
        let config = RunConfig::new(prior, ModelKind::Gaussian, 10_000, 2_000, 10, seed);
        run_chain(&config, &data, &mut RandomSource::new(seed, stream)).unwrap()
    };
    let (q, d) = std::thread::scope(|s| {
        let q = s.spawn(|| run(qb, 1));
        let d = s.spawn(|| run(dp, 2));
        (q.join().unwrap(), d.join().unwrap())
    });
    let tail = |probs: Vec<f64>| probs[4..].iter().sum::<f64>();
    let (tail_qb, tail_dp) = (tail(q.t_probabilities()), tail(d.t_probabilities()));
    assert!(tail_dp > 0.0);
    assert!(tail_dp > tail_qb, "DP {tail_dp} vs QB {tail_qb}");
}

#[test]
fn bivariate_scenario_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
scenario = "gauss2d"
sample_sizes = [500]
seed = 3
output_dir = "{}"
[sampler]
iterations = 1500
burn_in = 500
thinning = 5
truncation = 30
write_partitions = true
[[priors]]
kind = "qb"
p = 0.9
alpha = 1.0
"#,
        dir.path().display()
    );
    let config = ExperimentConfig::from_toml(&text, std::path::Path::new("inline.toml")).unwrap();
    let outcome = run_experiment(&config).unwrap();
    let probs = outcome.t_probabilities("QB", 500).unwrap();
    let mode = (1..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    assert_eq!(mode, 3, "{probs:?}");
    let ndjson = std::fs::read_to_string(dir.path().join("traces/assignments_QB_n500_chain0.ndjson")).unwrap();
    assert_eq!(ndjson.lines().count(), 200);
    let first: serde_json::Value = serde_json::from_str(ndjson.lines().next().unwrap()).unwrap();
    assert_eq!(first["assignments"].as_array().unwrap().len(), 500);
}

#[test]
fn custom_scenario_reads_data_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("obs.csv");
    let mut text = String::from("y\n");
    for i in 0..40 {
        text.push_str(&format!("{}\n", if i % 2 == 0 { -6.0 + 0.01 * i as f64 } else { 6.0 - 0.01 * i as f64 }));
    }
    std::fs::write(&data, text).unwrap();
    let config = format!(
        r#"
scenario = "custom"
model = "gaussian"
data_file = "{}"
seed = 8
output_dir = "{}"
[sampler]
iterations = 600
burn_in = 200
thinning = 2
truncation = 20
[[priors]]
kind = "qb"
p = 0.9
alpha = 1.0
"#,
        data.display(),
        dir.path().join("out").display()
    );
    let config = ExperimentConfig::from_toml(&config, std::path::Path::new("custom.toml")).unwrap();
    let outcome = run_experiment(&config).unwrap();
    assert_eq!(outcome.cells[0].n, 40);
    assert_eq!(outcome.cells[0].summary.t_mode(), 2);

    let missing = "scenario = \"custom\"\nseed = 1\n[[priors]]\nkind = \"qb\"\np = 0.9\nalpha = 1.0\n";
    assert!(ExperimentConfig::from_toml(missing, std::path::Path::new("m.toml")).is_err());
}

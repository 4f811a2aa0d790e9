mod common;

use std::path::Path;
use std::time::Instant;

use bayes_dsse::experiment::{
    benchmark_latency, run_experiment, AseEntry, Case, ExperimentConfig, Method, RunOptions, WlsBench,
};
use bayes_dsse::nn::init_he;
use bayes_dsse::wls::{WlsOptions, WlsSolver};

/// The shipped four-bus feeder, shrunk to a few seconds and given a second scenario.
fn small_config(output: &Path, probability: f64) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/feeder4.json");
    let mut cfg = ExperimentConfig::load(path).unwrap();
    let mut second = cfg.scenarios[0].clone();
    second.name = "peak".into();
    for e in &mut second.distributions.entries {
        e.load.means.iter_mut().for_each(|m| *m *= 1.5);
    }
    cfg.scenarios.push(second);
    cfg.samples.train = 300;
    cfg.samples.validation = 100;
    cfg.samples.test = 100;
    cfg.hidden = vec![16, 16];
    cfg.train.max_epochs = 15;
    cfg.baselines.regressor_train.max_epochs = 10;
    cfg.pruning.enabled = false;
    cfg.benchmark.trials = 5;
    cfg.bad_data.probability = probability;
    cfg.output = output.to_path_buf();
    cfg
}

fn dry() -> RunOptions {
    RunOptions { dry: true, ..RunOptions::default() }
}

#[test]
fn overall_ase_aggregates_scenario_sums_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("out"), 0.3);
    let report = run_experiment(&cfg, &dry()).unwrap().report;
    assert_eq!(report.scenarios.len(), 2);
    assert!(!dir.path().join("out").exists(), "a dry run must not write");
    for method in Method::ALL {
        for case in [Case::Clean, Case::Corrupted, Case::Filtered] {
            let parts: Vec<&AseEntry> = report.scenarios.iter().map(|s| s.ase_of(method, case).unwrap()).collect();
            let all = report.overall_of(method, case).unwrap();
            assert_eq!(all.m, parts.iter().map(|p| p.m).sum::<usize>());
            assert_eq!(all.failures, parts.iter().map(|p| p.failures).sum::<usize>());
            assert_eq!(all.sum_sq, parts[0].sum_sq + parts[1].sum_sq);
            assert_eq!(all.ase, Some(all.sum_sq / (all.m * all.n) as f64));
            assert_eq!(all.m + all.failures, 200);
        }
    }
}

#[test]
fn zero_corruption_probability_leaves_the_estimates_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("out"), 0.0);
    let report = run_experiment(&cfg, &dry()).unwrap().report;
    for method in Method::ALL {
        let clean = report.overall_of(method, Case::Clean).unwrap();
        let corrupted = report.overall_of(method, Case::Corrupted).unwrap();
        assert_eq!((clean.sum_sq, clean.m), (corrupted.sum_sq, corrupted.m), "{method}");
    }
}

#[test]
fn repeated_runs_produce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("out"), 0.3);
    let a = serde_json::to_string(&run_experiment(&cfg, &dry()).unwrap().report).unwrap();
    let b = serde_json::to_string(&run_experiment(&cfg, &dry()).unwrap().report).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(a, serde_json::to_string(&run_experiment(&other, &dry()).unwrap().report).unwrap());
}

#[test]
fn zero_benchmark_trials_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("out"), 0.0);
    cfg.scenarios.truncate(1);
    let artifacts = run_experiment(&cfg, &dry()).unwrap();
    let estimator = &artifacts.estimators[0].1;
    let net = common::random_radial(3, 1, false, &mut common::rng(1));
    let spec = common::full_spec(&net);
    let solver = WlsSolver::new(&net, &spec).unwrap();
    let x0 = bayes_dsse::powerflow::StateVector::flat(&net);
    let cases = vec![(vec![0.0; spec.len()], vec![1.0; spec.len()])];
    let bench = WlsBench { solver: &solver, cases: &cases, x0: &x0, options: WlsOptions::default() };
    let inputs = vec![bayes_dsse::powerflow::MeasurementVector::new(vec![0.0; estimator.mlp.input_dim()])];
    assert!(benchmark_latency(estimator, &inputs, &bench, 0).is_err());
    assert!(benchmark_latency(estimator, &[], &bench, 3).is_err());
}

/// Median seconds of one forward pass through five hidden layers of `width`.
fn forward_seconds(width: usize) -> f64 {
    let mlp = init_he(&[20, width, width, width, width, width, 24], 3).unwrap();
    let z: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut times: Vec<f64> = (0..31)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..50 {
                std::hint::black_box(mlp.forward(std::hint::black_box(&z)).unwrap());
            }
            start.elapsed().as_secs_f64() / 50.0
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[test]
fn inference_cost_grows_subcubically_in_width() {
    let widths = [64.0f64, 128.0, 256.0];
    let logs: Vec<(f64, f64)> = widths.iter().map(|&w| (w.ln(), forward_seconds(w as usize).ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / logs.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!(slope < 3.0, "scaling exponent {slope}");
}

mod common;

use bayes_dsse::grid::Network;
use bayes_dsse::injection::GaussianMixture;
use bayes_dsse::powerflow::{evaluate_h, MeasurementVector};
use bayes_dsse::sampling::{
    generate_training_set, inject_bad_data, inject_missing, read_training_set, sample_injections, sample_rng,
    synthesize_meter_series, write_training_set, BadDataConfig, BusPhaseDistribution, GenerationOptions, NoiseModel,
    ScenarioDistributions, TrainingSet,
};
use proptest::prelude::*;
use rand::Rng;

fn desk_network() -> Network {
    common::random_radial(6, 1, false, &mut common::rng(1))
}

fn generate(net: &Network, sigma: f64, count: usize, seed: u64, threads: usize) -> TrainingSet {
    let spec = common::full_spec(net);
    let noise = NoiseModel::uniform(spec.len(), sigma);
    let dists = common::gaussian_loads(net, 0.02, 0.2);
    generate_training_set(net, &dists, &spec, &noise, count, seed, &GenerationOptions { threads, ..Default::default() })
        .unwrap()
}

#[test]
fn zero_noise_measurements_equal_h_of_state() {
    let net = desk_network();
    let set = generate(&net, 0.0, 200, 4, 0);
    for s in &set.samples {
        assert_eq!(s.z.values, evaluate_h(&s.state, &net, &set.spec).unwrap().values);
        assert_eq!(s.z.values, s.clean);
    }
}

#[test]
fn generation_is_independent_of_thread_count() {
    let net = desk_network();
    let one = generate(&net, 1e-3, 300, 5, 1);
    let two = generate(&net, 1e-3, 300, 5, 2);
    let global = generate(&net, 1e-3, 300, 5, 0);
    assert_eq!(one, two);
    assert_eq!(one, global);
    assert_ne!(one, generate(&net, 1e-3, 300, 6, 1));
}

#[test]
fn measurement_noise_has_the_configured_deviation() {
    let net = desk_network();
    let sigma = 2e-3;
    let set = generate(&net, sigma, 10_000, 6, 0);
    for ch in 0..set.spec.len() {
        let e: Vec<f64> = set.samples.iter().map(|s| s.z.values[ch] - s.clean[ch]).collect();
        let sd = common::variance(&e).sqrt();
        assert!((sd - sigma).abs() < 0.03 * sigma, "channel {ch}: {sd:e}");
    }
}

#[test]
fn injection_draws_have_the_mixture_mean() {
    let load = GaussianMixture::new(vec![0.3, 0.7], vec![0.01, 0.05], vec![1e-5, 4e-5]).unwrap();
    let gen = GaussianMixture::gaussian(0.02, 1e-5);
    let dist = BusPhaseDistribution { generation: Some(gen), ..BusPhaseDistribution::load_only(2, 1, load) };
    let mut rng = common::rng(10);
    let p: Vec<f64> = (0..100_000).map(|_| sample_injections(&[&dist], &mut rng).p[0]).collect();
    let expect = -dist.mean_net_consumption();
    assert!((common::mean(&p) - expect).abs() < 0.01 * expect.abs(), "{} vs {expect}", common::mean(&p));
}

#[test]
fn corruption_and_missing_rates_match_their_probabilities() {
    let m = 100;
    let z = MeasurementVector::new(vec![0.0; m]);
    let sigma = vec![1.0; m];
    let cfg = BadDataConfig { probability: 0.3, ratio: 10.0, missing_probability: 0.0 };
    let mut bad = 0usize;
    let mut missing = 0usize;
    let mut sq = 0.0;
    for k in 0..1000 {
        let mut rng = sample_rng(3, k);
        let (out, mask) = inject_bad_data(&z, &z.values, &sigma, &cfg, &mut rng).unwrap();
        bad += mask.iter().filter(|&&b| b).count();
        sq += out.values.iter().zip(&mask).filter(|(_, &b)| b).map(|(v, _)| v * v).sum::<f64>();
        assert!(out.values.iter().zip(&mask).all(|(v, &b)| b || *v == 0.0));
        missing += inject_missing(&z, 0.1, &mut rng).unwrap().valid.iter().filter(|v| !**v).count();
    }
    let total = (1000 * m) as f64;
    assert!((bad as f64 / total - 0.3).abs() < 0.01);
    assert!((missing as f64 / total - 0.1).abs() < 0.01);
    let sd = (sq / bad as f64).sqrt();
    assert!((sd - 10.0).abs() < 0.3, "bad-data deviation {sd}");
}

#[test]
fn persisted_sets_read_back_identically() {
    let net = desk_network();
    let set = generate(&net, 1e-3, 50, 8, 0);
    let dir = tempfile::tempdir().unwrap();
    write_training_set(dir.path(), &net, &set, Some("abc".into())).unwrap();
    let back = read_training_set(dir.path(), &net).unwrap();
    assert_eq!((back.seed, back.attempted, back.failures, &back.spec), (set.seed, set.attempted, set.failures, &set.spec));
    assert_eq!(back.len(), set.len());
    for (b, s) in back.samples.iter().zip(&set.samples) {
        assert_eq!(b.index, s.index);
        assert_eq!(b.state, s.state);
        assert_eq!(b.z, s.z);
        assert_eq!(b.clean, s.clean);
        // Injections are recomputed from the state, exact up to the solver tolerance.
        assert!(common::max_abs_diff(&b.injection.p, &s.injection.p) < 1e-8);
        assert!(common::max_abs_diff(&b.injection.q, &s.injection.q) < 1e-8);
    }
}

#[test]
fn too_many_failures_abort_generation() {
    let net = desk_network();
    let spec = common::full_spec(&net);
    let heavy = ScenarioDistributions {
        entries: common::gaussian_loads(&net, 50.0, 0.1).entries,
    };
    let noise = NoiseModel::uniform(spec.len(), 0.0);
    assert!(generate_training_set(&net, &heavy, &spec, &noise, 20, 1, &GenerationOptions::default()).is_err());
}

proptest! {
    #[test]
    fn meter_readings_conserve_energy(seed in any::<u64>(), t in 1usize..30, blocks in 1usize..50) {
        let mut rng = common::rng(seed);
        let fast: Vec<f64> = (0..t * blocks).map(|_| rng.random_range(0.0..2.0)).collect();
        let series = synthesize_meter_series("load_b2_p1", &fast, t).unwrap();
        prop_assert_eq!(series.readings.len(), blocks);
        let total: f64 = series.readings.iter().sum();
        prop_assert!((total - fast.iter().sum::<f64>()).abs() < 1e-9);
        for (r, c) in series.readings.iter().zip(fast.chunks(t)) {
            prop_assert_eq!(*r, c.iter().sum::<f64>());
        }
    }
}

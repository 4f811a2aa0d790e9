use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bayes_dsse::baddata::{estimate_h0_stats, wald_detect, write_detection_csv};
use bayes_dsse::experiment::{
    benchmark_scenario, derive_seed, estimator_seed, generate_split, prune_scenario, run_experiment, train_scenario,
    ExperimentConfig, RunOptions, Scenario, Setup, Split, WlsSetup,
};
use bayes_dsse::injection::{read_meter_csv, write_meter_csv, ARModel};
use bayes_dsse::nn::{load_estimator, save_estimator, Estimator};
use bayes_dsse::powerflow::{MeasurementSpec, MeasurementVector};
use bayes_dsse::pruning::write_prune_csv;
use bayes_dsse::sampling::{
    inject_bad_data, learn_distributions, read_training_set, sample_rng, simulate_meter_data, write_training_set,
    MeterSynthesis, TrainingSet,
};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Bayesian state estimation for unobservable distribution systems.
#[derive(Parser)]
#[command(name = "dsse", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArg {
    /// Restrict to one scenario.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test sets under `<out>/<scenario>/`.
    GenData(ScenarioArg),
    /// Learn fast-timescale injection mixtures from meter readings.
    LearnDist(LearnDistArgs),
    /// Train the state estimator of each scenario.
    Train(ScenarioArg),
    /// Cluster-prune and retrain trained estimators.
    Prune(ScenarioArg),
    /// Estimate states from measurement rows.
    Estimate(EstimateArgs),
    /// Run the Wald test on measurement rows.
    Detect(DetectArgs),
    /// Evaluate trained estimators against the WLS baselines.
    Evaluate,
    /// Time NN inference against WLS solves.
    Benchmark(BenchmarkArgs),
    /// Full pipeline: generate, train, evaluate, prune, benchmark.
    Run(RunArgs),
}

#[derive(Args)]
struct LearnDistArgs {
    /// Synthesize meter readings from each inline scenario first.
    #[arg(long)]
    simulate: bool,
    /// Readings per synthesized meter.
    #[arg(long, default_value_t = 2000)]
    readings: usize,
    /// Fast intervals per synthesized reading.
    #[arg(long, default_value_t = 4)]
    aggregation: usize,
    /// AR(1) coefficient of the synthesized fast fluctuation.
    #[arg(long, default_value_t = 0.5)]
    ar_coefficient: f64,
    /// Mixture components to fit.
    #[arg(long, default_value_t = 3)]
    components: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Model manifest; defaults to `<out>/<scenario>/model.json`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Measurement CSV with channel-label header; defaults to the scenario's test set.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Destination CSV; defaults to `<out>/<scenario>/estimates.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Measurement CSV; defaults to the test set corrupted per the config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Destination CSV; defaults to `<out>/<scenario>/wald.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Override the configured trial count.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Also write the generated sample sets.
    #[arg(long)]
    save_sets: bool,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn selected<'a>(setup: &'a Setup, arg: &ScenarioArg) -> Result<Vec<&'a Scenario>> {
    match &arg.scenario {
        Some(name) => Ok(vec![setup.scenario(name)?]),
        None => Ok(setup.scenarios.iter().collect()),
    }
}

/// Stored split when present, otherwise regenerated from the config.
fn split_set(cfg: &ExperimentConfig, setup: &Setup, scenario: &Scenario, split: Split) -> Result<TrainingSet> {
    let dir = cfg.output.join(&scenario.name).join(split.label());
    if dir.join("manifest.json").exists() {
        log::info!("reading {}", dir.display());
        let set = read_training_set(&dir, &setup.network).with_context(|| format!("reading {}", dir.display()))?;
        if set.spec != setup.spec {
            bail!("{} was generated with a different measurement spec", dir.display());
        }
        Ok(set)
    } else {
        log::info!("generating {} set for {}", split.label(), scenario.name);
        Ok(generate_split(cfg, setup, scenario, split)?)
    }
}

fn model_path(cfg: &ExperimentConfig, scenario: &str) -> PathBuf {
    cfg.output.join(scenario).join("model.json")
}

fn load_model(path: &Path) -> Result<Estimator> {
    let (e, _) = load_estimator(path).with_context(|| format!("loading {} (run `dsse train` first)", path.display()))?;
    Ok(e)
}

/// Rows of a CSV whose header lists the channel labels of `spec`; empty or
/// `NaN` fields are missing.
fn read_measurements(path: &Path, spec: &MeasurementSpec) -> Result<Vec<MeasurementVector>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let labels: Vec<String> = spec.channels.iter().map(|c| c.label()).collect();
    if header != labels {
        bail!("{}: header {:?} does not match the channels {:?}", path.display(), header, labels);
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut values = Vec::with_capacity(rec.len());
        let mut valid = Vec::with_capacity(rec.len());
        for f in rec.iter() {
            let v = if f.trim().is_empty() { f64::NAN } else { f.trim().parse::<f64>().with_context(|| format!("{f:?}"))? };
            valid.push(!v.is_nan());
            values.push(if v.is_nan() { 0.0 } else { v });
        }
        rows.push(MeasurementVector { values, valid });
    }
    Ok(rows)
}

fn gen_data(cfg: &ExperimentConfig, arg: &ScenarioArg) -> Result<()> {
    let setup = Setup::new(cfg)?;
    for s in selected(&setup, arg)? {
        for split in Split::ALL {
            let set = generate_split(cfg, &setup, s, split)?;
            let dir = cfg.output.join(&s.name).join(split.label());
            write_training_set(&dir, &setup.network, &set, Some(setup.config_sha256.clone()))?;
            println!("{}: {} samples ({} power-flow failures) -> {}", s.name, set.len(), set.failures, dir.display());
        }
    }
    Ok(())
}

fn learn_dist(cfg: &ExperimentConfig, args: &LearnDistArgs) -> Result<()> {
    if args.simulate {
        let ar = ARModel::new(vec![args.ar_coefficient], 1.0)?;
        let synth = MeterSynthesis { aggregation: args.aggregation, readings: args.readings, ar: ar.clone() };
        for s in &cfg.scenarios {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("meters/{}", s.name)));
            let series = simulate_meter_data(&s.distributions, &synth, &mut rng)?;
            let dir = cfg.output.join(&s.name);
            std::fs::create_dir_all(&dir)?;
            let meters = dir.join("meters.csv");
            write_meter_csv(&meters, &series)?;
            let series = read_meter_csv(&meters, args.aggregation)?;
            let learned = learn_distributions(&series, &[ar.clone()], args.components, &Default::default())?;
            let out = dir.join("distributions.json");
            std::fs::write(&out, serde_json::to_string_pretty(&learned)? + "\n")?;
            println!("{}: {} meters -> {}", s.name, series.len(), out.display());
        }
        return Ok(());
    }
    let Some(l) = &cfg.learned else {
        bail!("config has no `learned` scenario; pass --simulate to synthesize meter data");
    };
    let setup = Setup::new(cfg)?;
    let s = setup.scenario(&l.name)?;
    let dir = cfg.output.join(&s.name);
    std::fs::create_dir_all(&dir)?;
    let out = dir.join("distributions.json");
    std::fs::write(&out, serde_json::to_string_pretty(&s.distributions)? + "\n")?;
    println!("{}: {} bus-phases -> {}", s.name, s.distributions.entries.len(), out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, arg: &ScenarioArg) -> Result<()> {
    let setup = Setup::new(cfg)?;
    for s in selected(&setup, arg)? {
        let train = split_set(cfg, &setup, s, Split::Train)?;
        let val = split_set(cfg, &setup, s, Split::Validation)?;
        let (estimator, report) = train_scenario(cfg, &setup.network, &s.name, &train, &val)?;
        let path = model_path(cfg, &s.name);
        save_estimator(&path, &estimator, estimator_seed(cfg, &s.name), Some(setup.config_sha256.clone()))?;
        println!(
            "{}: best epoch {} of {}, validation loss {:.4e} -> {}",
            s.name,
            report.best_epoch,
            report.stopped_epoch,
            report.best_val_loss(),
            path.display()
        );
    }
    Ok(())
}

fn prune(cfg: &ExperimentConfig, arg: &ScenarioArg) -> Result<()> {
    let setup = Setup::new(cfg)?;
    for s in selected(&setup, arg)? {
        let estimator = load_model(&model_path(cfg, &s.name))?;
        let train = split_set(cfg, &setup, s, Split::Train)?;
        let val = split_set(cfg, &setup, s, Split::Validation)?;
        let test = split_set(cfg, &setup, s, Split::Test)?;
        let (pruned, report) = prune_scenario(cfg, &s.name, &estimator, &train, &val, Some(&test))?;
        let dir = cfg.output.join(&s.name);
        save_estimator(dir.join("model_pruned.json"), &pruned, estimator_seed(cfg, &s.name), Some(setup.config_sha256.clone()))?;
        write_prune_csv(dir.join("pruning.csv"), &report)?;
        println!(
            "{}: {} -> {} hidden neurons, widths {:?}",
            s.name,
            estimator.mlp.hidden_neurons(),
            pruned.mlp.hidden_neurons(),
            &pruned.mlp.dims()[1..pruned.mlp.dims().len() - 1]
        );
    }
    Ok(())
}

fn one_scenario<'a>(setup: &'a Setup, arg: &ScenarioArg) -> Result<&'a Scenario> {
    let all = selected(setup, arg)?;
    match all.as_slice() {
        [one] => Ok(one),
        _ => bail!("several scenarios configured; pick one with --scenario"),
    }
}

fn estimate(cfg: &ExperimentConfig, args: &EstimateArgs) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let s = one_scenario(&setup, &args.scenario)?;
    let estimator = load_model(&args.model.clone().unwrap_or_else(|| model_path(cfg, &s.name)))?;
    let rows = match &args.input {
        Some(p) => read_measurements(p, &setup.spec)?,
        None => split_set(cfg, &setup, s, Split::Test)?.samples.into_iter().map(|x| x.z).collect(),
    };
    let output = args.output.clone().unwrap_or_else(|| cfg.output.join(&s.name).join("estimates.csv"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(&output)?;
    let bps = setup.network.bus_phases();
    let mut header: Vec<String> = bps.iter().map(|bp| format!("V_b{}_p{}", bp.bus, bp.phase)).collect();
    header.extend(bps.iter().map(|bp| format!("theta_b{}_p{}", bp.bus, bp.phase)));
    w.write_record(&header)?;
    let mut imputed = 0;
    for mut z in rows {
        // Missing channels take their training mean.
        for i in 0..z.len().min(estimator.scaler.input_mean.len()) {
            if !z.valid[i] {
                z.values[i] = estimator.scaler.input_mean[i];
                z.valid[i] = true;
                imputed += 1;
            }
        }
        let x = estimator.estimate(&z)?;
        w.write_record(x.to_coordinates().iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    println!("estimates -> {} ({imputed} missing channels imputed)", output.display());
    Ok(())
}

fn detect(cfg: &ExperimentConfig, args: &DetectArgs) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let s = one_scenario(&setup, &args.scenario)?;
    let stats = estimate_h0_stats(&split_set(cfg, &setup, s, Split::Train)?)?;
    let rows: Vec<(MeasurementVector, Option<Vec<bool>>)> = match &args.input {
        Some(p) => read_measurements(p, &setup.spec)?.into_iter().map(|z| (z, None)).collect(),
        None => {
            let seed = derive_seed(cfg.seed, &format!("corrupt/{}", s.name));
            split_set(cfg, &setup, s, Split::Test)?
                .samples
                .iter()
                .map(|x| {
                    let mut rng = sample_rng(seed, x.index);
                    let (z, truth) = inject_bad_data(&x.z, &x.clean, &stats.std, &cfg.bad_data, &mut rng)?;
                    Ok((z, Some(truth)))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut flagged = 0;
    let mut out = Vec::with_capacity(rows.len());
    for (z, truth) in rows {
        let flags = wald_detect(&z, &stats, &cfg.wald)?;
        flagged += flags.iter().filter(|f| **f).count();
        out.push((z, flags, truth));
    }
    let output = args.output.clone().unwrap_or_else(|| cfg.output.join(&s.name).join("wald.csv"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_detection_csv(&output, &setup.spec, &stats, &out)?;
    println!("{} rows, {flagged} flagged channels -> {}", out.len(), output.display());
    Ok(())
}

fn print_summary(report: &bayes_dsse::experiment::EvaluationReport) {
    for e in &report.overall {
        let ase = e.ase.map_or("n/a".to_string(), |v| format!("{v:.4e}"));
        println!("{:<7} {:<10} ASE {ase} (M={}, N={}, failures={})", e.method, e.case, e.m, e.n, e.failures);
    }
}

fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let options = RunOptions { models_from: Some(cfg.output.clone()), ..Default::default() };
    let artifacts = run_experiment(cfg, &options)?;
    print_summary(&artifacts.report);
    println!("report -> {}", artifacts.output.join("report.json").display());
    Ok(())
}

fn benchmark(cfg: &ExperimentConfig, args: &BenchmarkArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(t) = args.trials {
        cfg.benchmark.trials = t;
    }
    let setup = Setup::new(&cfg)?;
    let path = cfg.output.join("latency.csv");
    std::fs::create_dir_all(&cfg.output)?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["scenario", "trials", "nn_seconds", "wls_seconds", "ratio"])?;
    for s in selected(&setup, &args.scenario)? {
        let estimator = load_model(&model_path(&cfg, &s.name))?;
        let test = split_set(&cfg, &setup, s, Split::Test)?;
        let wls = WlsSetup::new(&cfg, &setup, s)?;
        let t = benchmark_scenario(&cfg, &setup, s, &estimator, &wls, &test)?;
        println!(
            "{}: NN {:.3} us, WLS {:.3} us, ratio {:.1}",
            s.name,
            t.nn_seconds * 1e6,
            t.wls_seconds * 1e6,
            t.ratio
        );
        w.write_record([s.name.clone(), t.trials.to_string(), t.nn_seconds.to_string(), t.wls_seconds.to_string(), t.ratio.to_string()])?;
    }
    w.flush()?;
    println!("latency -> {}", path.display());
    Ok(())
}

fn run(cfg: &ExperimentConfig, args: &RunArgs) -> Result<()> {
    let options = RunOptions { save_training_sets: args.save_sets, ..Default::default() };
    let artifacts = run_experiment(cfg, &options)?;
    print_summary(&artifacts.report);
    for (name, t) in &artifacts.latency {
        println!("{name}: latency ratio {:.1}", t.ratio);
    }
    println!("report -> {}", artifacts.output.join("report.json").display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::LearnDist(a) => learn_dist(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Prune(a) => prune(&cfg, a),
        Command::Estimate(a) => estimate(&cfg, a),
        Command::Detect(a) => detect(&cfg, a),
        Command::Evaluate => evaluate(&cfg),
        Command::Benchmark(a) => benchmark(&cfg, a),
        Command::Run(a) => run(&cfg, a),
    }
}

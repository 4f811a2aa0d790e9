use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, stage, AseAccumulator, ExperimentConfig, ExperimentError, MeasurementConfig};
use super::{benchmark_latency, squared_error, LatencyTable, WlsBench};
use crate::baddata::{
    detection_probability, estimate_h0_stats, filter_bad, jx_test, wald_detect, DetectionCounts, H0Stats,
};
use crate::grid::{load_network, Network};
use crate::injection::{fit_ar_ls, read_meter_csv};
use crate::nn::{fit_regressor, fit_state_estimator, load_estimator, save_estimator, Estimator, TrainReport};
use crate::powerflow::{MeasurementSpec, MeasurementVector, StateVector};
use crate::pruning::{prune_retrain_loop, write_prune_csv, DataDriver, PruneReport};
use crate::sampling::{
    default_placement, generate_training_set, inject_bad_data, inject_missing, learn_distributions, sample_injections,
    sample_rng, write_training_set, BusPhaseDistribution, NoiseModel, ScenarioDistributions, TrainingSet,
};
use crate::wls::{
    check_observability, pseudo_avg, pseudo_nn, ConsumptionHistory, InjectionRegressor, ObservabilityReport,
    PseudoMeasurementSet, WlsSolver,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BSEdnn")]
    Bsednn,
    #[serde(rename = "WLSp")]
    Wlsp,
    #[serde(rename = "WLSnnp")]
    Wlsnnp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bsednn, Method::Wlsp, Method::Wlsnnp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Bsednn => "BSEdnn",
            Method::Wlsp => "WLSp",
            Method::Wlsnnp => "WLSnnp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Measurement condition under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Clean,
    /// Gross errors injected.
    Corrupted,
    /// Gross errors injected, then Wald-flagged channels replaced by their H0 mean.
    Filtered,
    /// Channels dropped at random; the estimator sees their H0 mean, WLS drops them.
    Missing,
}

impl Case {
    pub fn label(self) -> &'static str {
        match self {
            Case::Clean => "clean",
            Case::Corrupted => "corrupted",
            Case::Filtered => "filtered",
            Case::Missing => "missing",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A resolved scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub distributions: ScenarioDistributions,
    /// Law of the past readings available to the pseudo-measurement baselines.
    pub history: ScenarioDistributions,
}

/// Resolve inline scenarios and learn the meter-file scenario, if any.
pub fn prepare_scenarios(cfg: &ExperimentConfig) -> Result<Vec<Scenario>, ExperimentError> {
    let mut out: Vec<Scenario> = cfg
        .scenarios
        .iter()
        .map(|s| Scenario {
            name: s.name.clone(),
            distributions: s.distributions.clone(),
            history: s.history.clone().unwrap_or_else(|| s.distributions.clone()),
        })
        .collect();
    if let Some(l) = &cfg.learned {
        let series = read_meter_csv(&l.meter_file, l.aggregation).map_err(stage("learn-dist"))?;
        let ar = match (&l.ar, &l.ar_trace) {
            (Some(ar), _) => ar.clone(),
            (None, Some(path)) => fit_ar_ls(&read_trace(path)?, l.ar_order).map_err(stage("learn-dist"))?,
            (None, None) => return Err(ExperimentError::Config("learned scenario needs `ar` or `ar_trace`".into())),
        };
        let dists = learn_distributions(&series, &[ar], l.components, &l.em).map_err(stage("learn-dist"))?;
        out.push(Scenario { name: l.name.clone(), history: dists.clone(), distributions: dists });
    }
    Ok(out)
}

/// Single-column CSV with header `value`.
fn read_trace(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    #[derive(Deserialize)]
    struct Row {
        value: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(stage("learn-dist"))?;
    r.deserialize::<Row>().map(|row| row.map(|r| r.value).map_err(stage("learn-dist"))).collect()
}

/// Past net-consumption readings per non-slack bus-phase, each the sum of
/// `aggregation` fast draws from `dists`.
pub fn history_for<R: rand::Rng + ?Sized>(
    dists: &[&BusPhaseDistribution],
    aggregation: usize,
    readings: usize,
    rng: &mut R,
) -> ConsumptionHistory {
    let mut out = vec![Vec::with_capacity(readings); dists.len()];
    for _ in 0..readings {
        let mut sum = vec![0.0; dists.len()];
        for _ in 0..aggregation {
            let s = sample_injections(dists, rng);
            for (acc, p) in sum.iter_mut().zip(&s.p) {
                *acc -= p;
            }
        }
        for (series, v) in out.iter_mut().zip(sum) {
            series.push(v);
        }
    }
    ConsumptionHistory { aggregation, readings: out }
}

/// Network, measurement spec and scenarios shared by every stage.
pub struct Setup {
    pub network: Network,
    pub spec: MeasurementSpec,
    pub scenarios: Vec<Scenario>,
    pub config_sha256: String,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        if cfg.baselines.pseudo.window > cfg.baselines.history_readings {
            return Err(ExperimentError::Config("pseudo window exceeds the history length".into()));
        }
        let network = load_network(&cfg.network).map_err(stage("network"))?;
        let spec = measurement_spec(cfg, &network);
        let scenarios = prepare_scenarios(cfg)?;
        Ok(Self { network, spec, scenarios, config_sha256: cfg.digest() })
    }

    pub fn scenario(&self, name: &str) -> Result<&Scenario, ExperimentError> {
        self.scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| ExperimentError::Config(format!("no scenario named {name:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn count(self, cfg: &ExperimentConfig) -> usize {
        match self {
            Split::Train => cfg.samples.train,
            Split::Validation => cfg.samples.validation,
            Split::Test => cfg.samples.test,
        }
    }
}

/// Sensor noise of `scenario` on `spec`.
pub fn scenario_noise(cfg: &ExperimentConfig, spec: &MeasurementSpec, scenario: &Scenario) -> NoiseModel {
    match cfg.noise.sigma {
        Some(s) => NoiseModel::uniform(spec.len(), s),
        None => NoiseModel::relative_to_consumption(&scenario.distributions, spec.len(), cfg.noise.fraction),
    }
}

/// One sample set of `scenario`, seeded by split and scenario name.
pub fn generate_split(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scenario: &Scenario,
    split: Split,
) -> Result<TrainingSet, ExperimentError> {
    let noise = scenario_noise(cfg, &setup.spec, scenario);
    let seed = derive_seed(cfg.seed, &format!("{}/{}", split.label(), scenario.name));
    generate_training_set(
        &setup.network,
        &scenario.distributions,
        &setup.spec,
        &noise,
        split.count(cfg),
        seed,
        &cfg.generation,
    )
    .map_err(stage("gen-data"))
}

/// Seed actually used to train the estimator of `scenario`.
pub fn estimator_seed(cfg: &ExperimentConfig, scenario: &str) -> u64 {
    derive_seed(cfg.seed, &format!("nn/{scenario}/{}", cfg.train.seed))
}

/// Train the state estimator of `scenario`.
pub fn train_scenario(
    cfg: &ExperimentConfig,
    network: &Network,
    scenario: &str,
    train: &TrainingSet,
    val: &TrainingSet,
) -> Result<(Estimator, TrainReport), ExperimentError> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = estimator_seed(cfg, scenario);
    in_pool(cfg.generation.threads, || fit_state_estimator(network, train, val, &cfg.hidden, &train_cfg))?
        .map_err(stage("train"))
}

/// Cluster-prune-retrain `estimator`; the test set only feeds the round report.
pub fn prune_scenario(
    cfg: &ExperimentConfig,
    scenario: &str,
    estimator: &Estimator,
    train: &TrainingSet,
    val: &TrainingSet,
    test: Option<&TrainingSet>,
) -> Result<(Estimator, PruneReport), ExperimentError> {
    let (tz, ty) = estimator.scaled_data(train).map_err(stage("prune"))?;
    let (vz, vy) = estimator.scaled_data(val).map_err(stage("prune"))?;
    let scaled_test = test.map(|t| estimator.scaled_data(t)).transpose().map_err(stage("prune"))?;
    let mut retrain = cfg.pruning.retrain.clone().unwrap_or_else(|| cfg.train.clone());
    retrain.seed = derive_seed(cfg.seed, &format!("prune/{scenario}/{}", retrain.seed));
    let mut driver = DataDriver {
        train: (&tz, &ty),
        val: (&vz, &vy),
        test: scaled_test.as_ref().map(|(z, y)| (z, y)),
        config: retrain,
    };
    let (mlp, report) = in_pool(cfg.generation.threads, || {
        prune_retrain_loop(estimator.mlp.clone(), &mut driver, cfg.pruning.threshold, cfg.pruning.max_rounds)
    })?
    .map_err(stage("prune"))?;
    Ok((Estimator { mlp, scaler: estimator.scaler.clone(), layout: estimator.layout.clone() }, report))
}

/// Augmented WLS problem shared by both pseudo-measurement baselines.
pub struct WlsSetup {
    pub solver: WlsSolver,
    /// Sensor deviation per real channel.
    pub sensor_sigma: Vec<f64>,
    /// Mean sensor deviation.
    pub sigma0: f64,
    pub pseudo_sigma: f64,
    pub x0: StateVector,
    /// Redundancy `channels − free states` of the augmented problem.
    pub dof: i64,
}

impl WlsSetup {
    pub fn new(cfg: &ExperimentConfig, setup: &Setup, scenario: &Scenario) -> Result<Self, ExperimentError> {
        let noise = scenario_noise(cfg, &setup.spec, scenario);
        if noise.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(ExperimentError::Config("WLS baselines need positive sensor noise".into()));
        }
        let network = &setup.network;
        let sensor_sigma = noise.sigma;
        let sigma0 = sensor_sigma.iter().sum::<f64>() / sensor_sigma.len() as f64;
        let b = &cfg.baselines;
        let pseudo_sigma = b.pseudo.sigma_factor * sigma0;
        let free = network.free_indices().len();
        let template = PseudoMeasurementSet::from_active(network, &vec![0.0; free], pseudo_sigma, b.pseudo.power_factor)
            .map_err(stage("wls"))?;
        let augmented = template.augment(&setup.spec);
        let solver = WlsSolver::new(network, &augmented).map_err(stage("wls"))?;
        Ok(Self {
            solver,
            sensor_sigma,
            sigma0,
            pseudo_sigma,
            x0: StateVector::flat(network),
            dof: (augmented.len() - 2 * free) as i64,
        })
    }
}

fn history_seed(cfg: &ExperimentConfig, scenario: &str) -> u64 {
    derive_seed(cfg.seed, &format!("history/test/{scenario}"))
}

/// Median NN and WLSp latencies over the first `cfg.benchmark.trials` test samples.
pub fn benchmark_scenario(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scenario: &Scenario,
    estimator: &Estimator,
    wls: &WlsSetup,
    test: &TrainingSet,
) -> Result<LatencyTable, ExperimentError> {
    let b = &cfg.baselines;
    let hist = scenario.history.aligned(&setup.network).map_err(stage("benchmark"))?;
    let seed = history_seed(cfg, &scenario.name);
    let cases: Vec<(Vec<f64>, Vec<f64>)> = test
        .samples
        .iter()
        .take(cfg.benchmark.trials.max(1))
        .map(|s| {
            let mut rng = sample_rng(seed, s.index);
            let h = history_for(&hist, b.aggregation, b.history_readings, &mut rng);
            let p = pseudo_avg(&setup.network, &h, wls.pseudo_sigma, &b.pseudo).map_err(stage("benchmark"))?;
            Ok(p.augment_values(&s.z.values, &wls.sensor_sigma))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let inputs: Vec<MeasurementVector> = test.samples.iter().map(|s| s.z.clone()).collect();
    benchmark_latency(
        estimator,
        &inputs,
        &WlsBench { solver: &wls.solver, cases: &cases, x0: &wls.x0, options: b.wls },
        cfg.benchmark.trials,
    )
}

/// ASE of one method under one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AseEntry {
    /// Scenario name, or `all` for the aggregate.
    pub scenario: String,
    pub method: Method,
    pub case: Case,
    pub ase: Option<f64>,
    pub sum_sq: f64,
    /// Estimates included.
    pub m: usize,
    /// Bus-phases per state.
    pub n: usize,
    /// Test samples without an estimate (WLS failures).
    pub failures: usize,
}

impl AseEntry {
    fn new(scenario: &str, method: Method, case: Case, acc: AseAccumulator, failures: usize) -> Self {
        Self { scenario: scenario.to_string(), method, case, ase: acc.ase(), sum_sq: acc.sum_sq, m: acc.m, n: acc.n, failures }
    }

    fn accumulator(&self) -> AseAccumulator {
        AseAccumulator { sum_sq: self.sum_sq, m: self.m, n: self.n }
    }
}

/// Per-channel Wald outcome on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldSummary {
    pub case: Case,
    /// Channel label, or `all`.
    pub channel: String,
    pub counts: DetectionCounts,
    pub false_alarm_rate: Option<f64>,
    pub detection_rate: Option<f64>,
}

impl WaldSummary {
    fn new(case: Case, channel: String, counts: DetectionCounts) -> Self {
        Self { case, channel, false_alarm_rate: counts.false_alarm_rate(), detection_rate: counts.detection_rate(), counts }
    }
}

/// `J(x)` rejections among the converged solves of one method and case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JxSummary {
    pub method: Method,
    pub case: Case,
    pub solved: usize,
    pub rejected: usize,
    pub rejection_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

impl From<&TrainReport> for FitSummary {
    fn from(r: &TrainReport) -> Self {
        Self { best_epoch: r.best_epoch, stopped_epoch: r.stopped_epoch, best_val_loss: r.best_val_loss() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSummary {
    pub neurons_before: usize,
    pub neurons_after: usize,
    pub widths_after: Vec<usize>,
    pub val_ase_before: f64,
    pub val_ase_after: f64,
    pub test_ase_after: f64,
    pub report: PruneReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Power-flow failures across the three sets.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub samples: SampleSummary,
    pub sensor_sigma: f64,
    /// `None` when the estimator was loaded rather than trained.
    pub estimator: Option<FitSummary>,
    pub regressor: FitSummary,
    pub ase: Vec<AseEntry>,
    pub wald: Vec<WaldSummary>,
    /// Detection probability predicted for the configured level and ratio.
    pub theoretical_detection: f64,
    pub jx: Vec<JxSummary>,
    pub pruning: Option<PruningSummary>,
}

impl ScenarioReport {
    pub fn ase_of(&self, method: Method, case: Case) -> Option<&AseEntry> {
        self.ase.iter().find(|e| e.method == method && e.case == case)
    }
}

/// Deterministic run summary; wall-clock figures live in [`RunArtifacts::timing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_sha256: String,
    pub seed: u64,
    pub bus_phases: usize,
    pub state_dim: usize,
    pub channels: usize,
    pub observability: ObservabilityReport,
    pub scenarios: Vec<ScenarioReport>,
    /// Across all scenarios.
    pub overall: Vec<AseEntry>,
}

impl EvaluationReport {
    pub fn overall_of(&self, method: Method, case: Case) -> Option<&AseEntry> {
        self.overall.iter().find(|e| e.method == method && e.case == case)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub scenario: String,
    pub item: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub save_models: bool,
    pub save_training_sets: bool,
    /// Skip writing any file.
    pub dry: bool,
    /// Load `<dir>/<scenario>/model.json` instead of training.
    pub models_from: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { save_models: true, save_training_sets: false, dry: false, models_from: None }
    }
}

pub struct RunArtifacts {
    pub report: EvaluationReport,
    pub timing: Vec<TimingRow>,
    pub latency: Vec<(String, LatencyTable)>,
    pub estimators: Vec<(String, Estimator)>,
    pub pruned: Vec<(String, Estimator)>,
    /// Scenarios whose estimator was trained in this run.
    pub train_reports: Vec<(String, TrainReport)>,
    pub output: PathBuf,
}

/// Everything one test sample contributes.
struct Outcome {
    /// `[method][case]`; `None` when the method produced no estimate.
    sq: Vec<Vec<Option<f64>>>,
    /// `[wls method][case]`.
    jx: Vec<Vec<Option<bool>>>,
    flags_clean: Vec<bool>,
    flags_corrupted: Vec<bool>,
    truth: Vec<bool>,
}

struct Evaluator<'a> {
    network: &'a Network,
    estimator: &'a Estimator,
    stats: &'a H0Stats,
    cfg: &'a ExperimentConfig,
    sensor_sigma: &'a [f64],
    pseudo_sigma: f64,
    solver: &'a WlsSolver,
    regressor: &'a InjectionRegressor,
    history: &'a [&'a BusPhaseDistribution],
    x0: &'a StateVector,
    cases: &'a [Case],
    corrupt_seed: u64,
    history_seed: u64,
    dof: i64,
}

impl Evaluator<'_> {
    fn inputs(&self, sample: &crate::sampling::Sample) -> Result<(Vec<MeasurementVector>, Outcome), ExperimentError> {
        let mut rng = sample_rng(self.corrupt_seed, sample.index);
        let (corrupted, truth) =
            inject_bad_data(&sample.z, &sample.clean, &self.stats.std, &self.cfg.bad_data, &mut rng).map_err(stage("corrupt"))?;
        let flags_clean = wald_detect(&sample.z, self.stats, &self.cfg.wald).map_err(stage("detect"))?;
        let flags_corrupted = wald_detect(&corrupted, self.stats, &self.cfg.wald).map_err(stage("detect"))?;
        let filtered = filter_bad(&corrupted, &flags_corrupted, self.stats).map_err(stage("detect"))?;
        let mut zs = Vec::with_capacity(self.cases.len());
        for case in self.cases {
            zs.push(match case {
                Case::Clean => sample.z.clone(),
                Case::Corrupted => corrupted.clone(),
                Case::Filtered => filtered.clone(),
                Case::Missing => {
                    inject_missing(&sample.z, self.cfg.bad_data.missing_probability, &mut rng).map_err(stage("corrupt"))?
                }
            });
        }
        let outcome = Outcome { sq: Vec::new(), jx: Vec::new(), flags_clean, flags_corrupted, truth };
        Ok((zs, outcome))
    }

    fn nn_input(&self, z: &MeasurementVector) -> Result<MeasurementVector, ExperimentError> {
        if z.all_valid() {
            Ok(z.clone())
        } else {
            filter_bad(z, &vec![false; z.len()], self.stats).map_err(stage("estimate"))
        }
    }

    fn wls(&self, pseudo: &PseudoMeasurementSet, z: &MeasurementVector) -> Option<crate::wls::WlsSolution> {
        let (values, mut weights) = pseudo.augment_values(&z.values, self.sensor_sigma);
        let mut values = values;
        for (i, ok) in z.valid.iter().enumerate() {
            if !ok {
                weights[i] = 0.0;
                values[i] = 0.0;
            }
        }
        match self.solver.solve(&values, &weights, self.x0, &self.cfg.baselines.wls) {
            Ok(s) => Some(s),
            Err(e) => {
                log::debug!("WLS failed: {e}");
                None
            }
        }
    }

    fn evaluate(&self, sample: &crate::sampling::Sample) -> Result<Outcome, ExperimentError> {
        let (zs, mut out) = self.inputs(sample)?;
        let mut nn_row = Vec::with_capacity(zs.len());
        for z in &zs {
            let x = self.estimator.estimate(&self.nn_input(z)?).map_err(stage("estimate"))?;
            nn_row.push(Some(squared_error(&x, &sample.state)));
        }
        out.sq.push(nn_row);

        let b = &self.cfg.baselines;
        let mut hrng = sample_rng(self.history_seed, sample.index);
        let history = history_for(self.history, b.aggregation, b.history_readings, &mut hrng);
        let pseudo_sets = [
            pseudo_avg(self.network, &history, self.pseudo_sigma, &b.pseudo).map_err(stage("wls"))?,
            pseudo_nn(self.network, &history, self.regressor, self.pseudo_sigma, &b.pseudo).map_err(stage("wls"))?,
        ];
        for pseudo in &pseudo_sets {
            let mut sq_row = Vec::with_capacity(zs.len());
            let mut jx_row = Vec::with_capacity(zs.len());
            for z in &zs {
                match self.wls(pseudo, z) {
                    Some(sol) => {
                        sq_row.push(Some(squared_error(&sol.state, &sample.state)));
                        let (_, mut w) = pseudo.augment_values(&z.values, self.sensor_sigma);
                        for (i, ok) in z.valid.iter().enumerate() {
                            if !ok {
                                w[i] = 0.0;
                            }
                        }
                        let dof = self.dof - z.valid.iter().filter(|v| !**v).count() as i64;
                        jx_row.push(jx_test(&sol.residual, &w, dof, b.jx_level).ok());
                    }
                    None => {
                        sq_row.push(None);
                        jx_row.push(None);
                    }
                }
            }
            out.sq.push(sq_row);
            out.jx.push(jx_row);
        }
        Ok(out)
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, ExperimentError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(stage("threads"))?;
    Ok(pool.install(f))
}

fn measurement_spec(cfg: &ExperimentConfig, network: &Network) -> MeasurementSpec {
    match &cfg.measurements {
        MeasurementConfig::Spec(s) => s.clone(),
        MeasurementConfig::Placement { branch_fraction, seed } => default_placement(network, *branch_fraction, *seed),
    }
}

fn batch_ase(estimator: &Estimator, set: &TrainingSet) -> Result<f64, ExperimentError> {
    let zs: Vec<MeasurementVector> = set.samples.iter().map(|s| s.z.clone()).collect();
    let xs = estimator.estimate_batch(&zs).map_err(stage("estimate"))?;
    let truths: Vec<StateVector> = set.samples.iter().map(|s| s.state.clone()).collect();
    super::compute_ase(&xs, &truths)
}

struct ScenarioRun {
    report: ScenarioReport,
    timing: Vec<TimingRow>,
    latency: LatencyTable,
    estimator: Estimator,
    pruned: Option<Estimator>,
    train_report: Option<TrainReport>,
}

fn run_scenario(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scenario: &Scenario,
    options: &RunOptions,
) -> Result<ScenarioRun, ExperimentError> {
    let network = &setup.network;
    let spec = &setup.spec;
    let name = scenario.name.as_str();
    let seed = cfg.seed;
    let mut timing = Vec::new();
    let mut time = |item: &str, seconds: f64| timing.push(TimingRow { scenario: name.into(), item: item.into(), seconds });
    let clock = Instant::now();
    let train = generate_split(cfg, setup, scenario, Split::Train)?;
    let val = generate_split(cfg, setup, scenario, Split::Validation)?;
    let test = generate_split(cfg, setup, scenario, Split::Test)?;
    time("generation", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let (estimator, train_report) = match &options.models_from {
        Some(dir) => {
            let (e, _) = load_estimator(dir.join(name).join("model.json")).map_err(stage("load"))?;
            (e, None)
        }
        None => {
            let (e, r) = train_scenario(cfg, network, name, &train, &val)?;
            (e, Some(r))
        }
    };
    time("train", clock.elapsed().as_secs_f64());

    let stats = estimate_h0_stats(&train).map_err(stage("detect"))?;

    // Pseudo-measurement regressor, fitted on the past process only: a window
    // of readings followed by the next fast-interval net injection.
    let hist = scenario.history.aligned(network).map_err(stage("wls"))?;
    let b = &cfg.baselines;
    let features = |count: usize, split: &str| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ExperimentError> {
        let hs = derive_seed(seed, &format!("regressor-data/{split}/{name}"));
        (0..count as u64)
            .map(|k| {
                let mut rng = sample_rng(hs, k);
                let h = history_for(&hist, b.aggregation, b.history_readings, &mut rng);
                let next = sample_injections(&hist, &mut rng).p;
                Ok((h.features(b.pseudo.window).map_err(stage("wls"))?, next))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().unzip())
    };
    let (rtz, rty) = features(train.len(), "train")?;
    let (rvz, rvy) = features(val.len(), "validation")?;
    let mut reg_cfg = b.regressor_train.clone();
    reg_cfg.seed = derive_seed(seed, &format!("regressor/{name}/{}", b.regressor_train.seed));
    let clock = Instant::now();
    let (reg_mlp, reg_scaler, reg_report) =
        fit_regressor(&rtz, &rty, &rvz, &rvy, &b.regressor_hidden, &reg_cfg).map_err(stage("wls"))?;
    time("regressor_train", clock.elapsed().as_secs_f64());
    let regressor = InjectionRegressor { mlp: reg_mlp, scaler: reg_scaler, window: b.pseudo.window };

    let wls = WlsSetup::new(cfg, setup, scenario)?;
    let mut cases = vec![Case::Clean, Case::Corrupted, Case::Filtered];
    if cfg.bad_data.missing_probability > 0.0 {
        cases.push(Case::Missing);
    }
    let evaluator = Evaluator {
        network,
        estimator: &estimator,
        stats: &stats,
        cfg,
        sensor_sigma: &wls.sensor_sigma,
        pseudo_sigma: wls.pseudo_sigma,
        solver: &wls.solver,
        regressor: &regressor,
        history: &hist,
        x0: &wls.x0,
        cases: &cases,
        corrupt_seed: derive_seed(seed, &format!("corrupt/{name}")),
        history_seed: history_seed(cfg, name),
        dof: wls.dof,
    };
    let clock = Instant::now();
    let outcomes: Vec<Result<Outcome, ExperimentError>> =
        in_pool(cfg.generation.threads, || test.samples.par_iter().map(|s| evaluator.evaluate(s)).collect())?;
    time("evaluation", clock.elapsed().as_secs_f64());

    let n = network.bus_phase_count();
    let labels: Vec<String> = spec.channels.iter().map(|c| c.label()).collect();
    let mut acc = vec![vec![(AseAccumulator::default(), 0usize); cases.len()]; Method::ALL.len()];
    let mut jx = vec![vec![(0usize, 0usize); cases.len()]; 2];
    let mut wald_clean = vec![DetectionCounts::default(); spec.len()];
    let mut wald_corrupt = vec![DetectionCounts::default(); spec.len()];
    for o in outcomes {
        let o = o?;
        for (m, row) in o.sq.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let (a, fails) = &mut acc[m][c];
                match v {
                    Some(sq) => {
                        a.sum_sq += sq;
                        a.m += 1;
                        a.n = n;
                    }
                    None => *fails += 1,
                }
            }
        }
        for (m, row) in o.jx.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(rejected) = v {
                    jx[m][c].0 += 1;
                    jx[m][c].1 += *rejected as usize;
                }
            }
        }
        for i in 0..spec.len() {
            wald_clean[i].add(&o.flags_clean[i..=i], &[false]);
            wald_corrupt[i].add(&o.flags_corrupted[i..=i], &o.truth[i..=i]);
        }
    }

    let mut ase = Vec::new();
    for (m, method) in Method::ALL.iter().enumerate() {
        for (c, case) in cases.iter().enumerate() {
            ase.push(AseEntry::new(name, *method, *case, acc[m][c].0, acc[m][c].1));
        }
    }
    let mut wald = Vec::new();
    for (case, counts) in [(Case::Clean, &wald_clean), (Case::Corrupted, &wald_corrupt)] {
        let mut total = DetectionCounts::default();
        for (label, c) in labels.iter().zip(counts.iter()) {
            total.clean += c.clean;
            total.false_alarms += c.false_alarms;
            total.bad += c.bad;
            total.detected += c.detected;
            wald.push(WaldSummary::new(case, label.clone(), *c));
        }
        wald.push(WaldSummary::new(case, "all".into(), total));
    }
    let mut jx_summary = Vec::new();
    for (m, method) in [Method::Wlsp, Method::Wlsnnp].iter().enumerate() {
        for (c, case) in cases.iter().enumerate() {
            let (solved, rejected) = jx[m][c];
            jx_summary.push(JxSummary {
                method: *method,
                case: *case,
                solved,
                rejected,
                rejection_rate: (solved > 0).then(|| rejected as f64 / solved as f64),
            });
        }
    }

    let mut pruned = None;
    let pruning = if cfg.pruning.enabled {
        let clock = Instant::now();
        let (p, report) = prune_scenario(cfg, name, &estimator, &train, &val, Some(&test))?;
        time("pruning", clock.elapsed().as_secs_f64());
        let dims = p.mlp.dims();
        let summary = PruningSummary {
            neurons_before: estimator.mlp.hidden_neurons(),
            neurons_after: p.mlp.hidden_neurons(),
            widths_after: dims[1..dims.len() - 1].to_vec(),
            val_ase_before: batch_ase(&estimator, &val)?,
            val_ase_after: batch_ase(&p, &val)?,
            test_ase_after: batch_ase(&p, &test)?,
            report,
        };
        pruned = Some(p);
        Some(summary)
    } else {
        None
    };

    let latency = benchmark_scenario(cfg, setup, scenario, &estimator, &wls, &test)?;
    time("nn_latency", latency.nn_seconds);
    time("wls_latency", latency.wls_seconds);
    time("latency_ratio", latency.ratio);

    if !options.dry {
        let dir = cfg.output.join(name);
        std::fs::create_dir_all(&dir)?;
        let sha = Some(setup.config_sha256.clone());
        let model_seed = estimator_seed(cfg, name);
        if options.save_models {
            if options.models_from.is_none() {
                save_estimator(dir.join("model.json"), &estimator, model_seed, sha.clone()).map_err(stage("save"))?;
            }
            if let Some(p) = &pruned {
                save_estimator(dir.join("model_pruned.json"), p, model_seed, sha.clone()).map_err(stage("save"))?;
            }
        }
        if options.save_training_sets {
            for (split, set) in [(Split::Train, &train), (Split::Validation, &val), (Split::Test, &test)] {
                write_training_set(dir.join(split.label()), network, set, sha.clone()).map_err(stage("save"))?;
            }
        }
        if let Some(p) = &pruning {
            write_prune_csv(dir.join("pruning.csv"), &p.report).map_err(stage("save"))?;
        }
    }

    let report = ScenarioReport {
        name: name.to_string(),
        samples: SampleSummary {
            train: train.len(),
            validation: val.len(),
            test: test.len(),
            failures: train.failures + val.failures + test.failures,
        },
        sensor_sigma: wls.sigma0,
        estimator: train_report.as_ref().map(FitSummary::from),
        regressor: FitSummary::from(&reg_report),
        ase,
        wald,
        theoretical_detection: detection_probability(cfg.wald.level, cfg.bad_data.ratio).map_err(stage("detect"))?,
        jx: jx_summary,
        pruning,
    };
    Ok(ScenarioRun { report, timing, latency, estimator, pruned, train_report })
}

#[derive(Serialize)]
struct DetectionCsvRow<'a> {
    scenario: &'a str,
    case: Case,
    channel: &'a str,
    clean: u64,
    false_alarms: u64,
    bad: u64,
    detected: u64,
    false_alarm_rate: Option<f64>,
    detection_rate: Option<f64>,
    theoretical_detection: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(stage("report"))?;
    for r in rows {
        w.serialize(r).map_err(stage("report"))?;
    }
    w.flush()?;
    Ok(())
}

/// Run every scenario end to end and write `report.json`, `ase.csv`,
/// `detection.csv`, `timing.csv` and per-scenario artifacts under `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig, options: &RunOptions) -> Result<RunArtifacts, ExperimentError> {
    let setup = Setup::new(cfg)?;
    let observability = check_observability(&setup.network, &setup.spec).map_err(stage("observability"))?;
    let mut runs = Vec::with_capacity(setup.scenarios.len());
    for s in &setup.scenarios {
        log::info!("scenario {}", s.name);
        runs.push(run_scenario(cfg, &setup, s, options)?);
    }

    let mut overall = Vec::new();
    if let Some(first) = runs.first() {
        for e in &first.report.ase {
            let mut total = AseAccumulator::default();
            let mut failures = 0;
            for r in &runs {
                let x = r.report.ase_of(e.method, e.case).expect("same cases in every scenario");
                total.merge(&x.accumulator())?;
                failures += x.failures;
            }
            overall.push(AseEntry::new("all", e.method, e.case, total, failures));
        }
    }
    let report = EvaluationReport {
        config_sha256: setup.config_sha256.clone(),
        seed: cfg.seed,
        bus_phases: setup.network.bus_phase_count(),
        state_dim: observability.state_dim,
        channels: setup.spec.len(),
        observability,
        scenarios: runs.iter().map(|r| r.report.clone()).collect(),
        overall,
    };
    let timing: Vec<TimingRow> = runs.iter().flat_map(|r| r.timing.clone()).collect();

    if !options.dry {
        std::fs::create_dir_all(&cfg.output)?;
        let mut json = serde_json::to_string_pretty(&report).map_err(stage("report"))?;
        json.push('\n');
        std::fs::write(cfg.output.join("report.json"), json)?;
        write_csv(
            &cfg.output.join("ase.csv"),
            report.scenarios.iter().flat_map(|s| s.ase.iter()).chain(report.overall.iter()),
        )?;
        let rows = report.scenarios.iter().flat_map(|s| {
            s.wald.iter().map(move |w| DetectionCsvRow {
                scenario: &s.name,
                case: w.case,
                channel: &w.channel,
                clean: w.counts.clean,
                false_alarms: w.counts.false_alarms,
                bad: w.counts.bad,
                detected: w.counts.detected,
                false_alarm_rate: w.false_alarm_rate,
                detection_rate: w.detection_rate,
                theoretical_detection: s.theoretical_detection,
            })
        });
        write_csv(&cfg.output.join("detection.csv"), rows)?;
        write_csv(&cfg.output.join("timing.csv"), timing.iter())?;
    }

    Ok(RunArtifacts {
        report,
        timing,
        latency: runs.iter().map(|r| (r.report.name.clone(), r.latency)).collect(),
        estimators: runs.iter().map(|r| (r.report.name.clone(), r.estimator.clone())).collect(),
        pruned: runs.iter().filter_map(|r| r.pruned.clone().map(|p| (r.report.name.clone(), p))).collect(),
        train_reports: runs.into_iter().filter_map(|r| r.train_report.map(|t| (r.report.name, t))).collect(),
        output: cfg.output.clone(),
    })
}

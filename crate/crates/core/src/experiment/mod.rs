//! End-to-end experiments: sampling, training, estimation, detection and
//! evaluation against the WLS baselines.

mod config;
mod latency;
mod run;

pub use config::{
    derive_seed, BaselineConfig, BenchmarkConfig, ExperimentConfig, LearnedConfig, MeasurementConfig, NoiseConfig,
    PruningConfig, SampleCounts, ScenarioConfig,
};
pub use latency::{benchmark_latency, LatencyTable, WlsBench};
pub use run::{
    benchmark_scenario, estimator_seed, generate_split, history_for, prepare_scenarios, prune_scenario, run_experiment,
    scenario_noise, train_scenario, AseEntry, Case, EvaluationReport, FitSummary, JxSummary, Method, PruningSummary,
    RunArtifacts, RunOptions, SampleSummary, Scenario, ScenarioReport, Setup, Split, TimingRow, WaldSummary, WlsSetup,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::powerflow::StateVector;

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Failure inside one pipeline stage.
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("ASE: {0}")]
    Ase(String),
    #[error("benchmark: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, message: e.to_string() }
}

/// Running `Σ‖x̂ − x‖²` with the counts needed for `ASE = Σ / (M·N)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AseAccumulator {
    pub sum_sq: f64,
    /// Estimates accumulated.
    pub m: usize,
    /// Bus-phases per state.
    pub n: usize,
}

impl AseAccumulator {
    pub fn add(&mut self, estimate: &StateVector, truth: &StateVector) -> Result<(), ExperimentError> {
        if estimate.len() != truth.len() || estimate.angle.len() != truth.angle.len() {
            return Err(ExperimentError::Ase("estimate and truth layouts differ".into()));
        }
        if self.m > 0 && self.n != truth.len() {
            return Err(ExperimentError::Ase("states of different sizes".into()));
        }
        self.n = truth.len();
        self.sum_sq += squared_error(estimate, truth);
        self.m += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &AseAccumulator) -> Result<(), ExperimentError> {
        if other.m == 0 {
            return Ok(());
        }
        if self.m > 0 && self.n != other.n {
            return Err(ExperimentError::Ase("states of different sizes".into()));
        }
        self.n = other.n;
        self.sum_sq += other.sum_sq;
        self.m += other.m;
        Ok(())
    }

    pub fn ase(&self) -> Option<f64> {
        (self.m > 0).then(|| self.sum_sq / (self.m * self.n) as f64)
    }
}

/// `‖x̂ − x‖²` over every magnitude and angle coordinate.
pub fn squared_error(estimate: &StateVector, truth: &StateVector) -> f64 {
    let dv = estimate.magnitude.iter().zip(&truth.magnitude).map(|(a, b)| (a - b).powi(2));
    let dt = estimate.angle.iter().zip(&truth.angle).map(|(a, b)| (a - b).powi(2));
    dv.chain(dt).sum()
}

/// `ASE = (1/MN) Σ_k ‖x̂[k] − x[k]‖²` with `N` the number of bus-phases; the
/// norm covers both magnitude and angle.
pub fn compute_ase(estimates: &[StateVector], truths: &[StateVector]) -> Result<f64, ExperimentError> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(ExperimentError::Ase(format!("{} estimates for {} truths", estimates.len(), truths.len())));
    }
    let mut acc = AseAccumulator::default();
    for (e, t) in estimates.iter().zip(truths) {
        acc.add(e, t)?;
    }
    Ok(acc.ase().expect("non-empty"))
}

//! Monte Carlo generation of state/measurement training pairs.
//!
//! Sample `k` of a run with seed `s` draws from its own ChaCha stream
//! `(s, k)`, so the output does not depend on how samples are spread across
//! worker threads.

mod corrupt;
mod meters;
mod persist;

pub use corrupt::{inject_bad_data, inject_missing, BadDataConfig};
pub use meters::{learn_distributions, simulate_meter_data, synthesize_meter_series, MeterSynthesis};
pub use persist::{read_training_set, sha256_hex, write_training_set, TrainingSetManifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::injection::{GaussianMixture, LearnError};
use crate::powerflow::{
    InjectionVector, MeasurementModel, MeasurementSpec, MeasurementVector, PowerFlowError,
    PowerFlowOptions, PowerFlowSolver, StateVector,
};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("scenario distributions: {0}")]
    Distributions(String),
    #[error("{failures} of {attempted} power flow solves failed (limit {limit:.0}%); last error: {last}")]
    TooManyFailures { failures: usize, attempted: usize, limit: f64, last: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("training set file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_load_pf() -> f64 {
    0.95
}

fn default_gen_pf() -> f64 {
    1.0
}

/// Injection law of one non-slack bus-phase (fast timescale, per-unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusPhaseDistribution {
    pub bus: u32,
    pub phase: u8,
    /// Consumption, positive when consuming.
    pub load: GaussianMixture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GaussianMixture>,
    #[serde(default = "default_load_pf")]
    pub load_power_factor: f64,
    #[serde(default = "default_gen_pf")]
    pub generation_power_factor: f64,
}

impl BusPhaseDistribution {
    pub fn load_only(bus: u32, phase: u8, load: GaussianMixture) -> Self {
        Self {
            bus,
            phase,
            load,
            generation: None,
            load_power_factor: default_load_pf(),
            generation_power_factor: default_gen_pf(),
        }
    }

    /// Mean net consumption.
    pub fn mean_net_consumption(&self) -> f64 {
        self.load.mean() - self.generation.as_ref().map_or(0.0, |g| g.mean())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioDistributions {
    pub entries: Vec<BusPhaseDistribution>,
}

impl ScenarioDistributions {
    /// Entries reordered to match [`Network::free_indices`]; every non-slack
    /// bus-phase must be covered exactly once.
    pub fn aligned(&self, network: &Network) -> Result<Vec<&BusPhaseDistribution>, SamplingError> {
        let bps = network.bus_phases();
        let free = network.free_indices();
        let mut out: Vec<Option<&BusPhaseDistribution>> = vec![None; free.len()];
        for e in &self.entries {
            let idx = network.bus_phase_index(e.bus, e.phase).ok_or_else(|| {
                SamplingError::Distributions(format!("bus {} phase {} not in network", e.bus, e.phase))
            })?;
            let pos = free.iter().position(|&f| f == idx).ok_or_else(|| {
                SamplingError::Distributions(format!("bus {} is the slack", e.bus))
            })?;
            if out[pos].is_some() {
                return Err(SamplingError::Distributions(format!(
                    "bus {} phase {} listed twice",
                    e.bus, e.phase
                )));
            }
            e.load.validate()?;
            if let Some(g) = &e.generation {
                g.validate()?;
            }
            for pf in [e.load_power_factor, e.generation_power_factor] {
                if !(pf > 0.0 && pf <= 1.0) {
                    return Err(SamplingError::Distributions(format!("power factor {pf} outside (0, 1]")));
                }
            }
            out[pos] = Some(e);
        }
        out.into_iter()
            .enumerate()
            .map(|(pos, e)| {
                e.ok_or_else(|| {
                    let bp = bps[free[pos]];
                    SamplingError::Distributions(format!("bus {} phase {} has no distribution", bp.bus, bp.phase))
                })
            })
            .collect()
    }

    /// Mean of `|mean net consumption|` across bus-phases.
    pub fn mean_abs_net_consumption(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.mean_net_consumption().abs()).sum::<f64>() / self.entries.len() as f64
    }
}

/// Draw one injection vector: `P = generation - load`, `Q` from each part's power factor.
pub fn sample_injections<R: Rng + ?Sized>(dists: &[&BusPhaseDistribution], rng: &mut R) -> InjectionVector {
    let mut p = Vec::with_capacity(dists.len());
    let mut q = Vec::with_capacity(dists.len());
    for d in dists {
        let load = d.load.sample(rng);
        let gen = d.generation.as_ref().map_or(0.0, |g| g.sample(rng));
        p.push(gen - load);
        q.push(gen * d.generation_power_factor.acos().tan() - load * d.load_power_factor.acos().tan());
    }
    InjectionVector { p, q }
}

/// Independent zero-mean Gaussian noise per channel. A zero deviation means noiseless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: Vec<f64>,
}

impl NoiseModel {
    pub fn uniform(channels: usize, sigma: f64) -> Self {
        Self { sigma: vec![sigma; channels] }
    }

    /// `fraction` of the mean absolute net consumption on every channel.
    pub fn relative_to_consumption(dists: &ScenarioDistributions, channels: usize, fraction: f64) -> Self {
        Self::uniform(channels, fraction * dists.mean_abs_net_consumption())
    }

    pub fn validate(&self, channels: usize) -> Result<(), SamplingError> {
        if self.sigma.len() != channels {
            return Err(SamplingError::Invalid(format!(
                "noise model has {} channels, spec has {channels}",
                self.sigma.len()
            )));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(SamplingError::Invalid("noise deviations must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn add_to<R: Rng + ?Sized>(&self, clean: &[f64], rng: &mut R) -> Vec<f64> {
        clean
            .iter()
            .zip(&self.sigma)
            .map(|(&h, &s)| {
                let e: f64 = StandardNormal.sample(rng);
                h + s * e
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Counter of the RNG stream that produced this sample.
    pub index: u64,
    pub injection: InjectionVector,
    pub state: StateVector,
    /// `h(x)` before noise.
    pub clean: Vec<f64>,
    pub z: MeasurementVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub spec: MeasurementSpec,
    pub attempted: usize,
    pub failures: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn measurements(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.z.values.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub powerflow: PowerFlowOptions,
    /// Abort when more than this fraction of solves fail.
    pub max_failure_fraction: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self { threads: 0, powerflow: PowerFlowOptions::default(), max_failure_fraction: 0.1 }
    }
}

/// RNG for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw `count` injections, solve each power flow and measure with noise.
/// Failed solves are skipped and counted.
pub fn generate_training_set(
    network: &Network,
    dists: &ScenarioDistributions,
    spec: &MeasurementSpec,
    noise: &NoiseModel,
    count: usize,
    seed: u64,
    options: &GenerationOptions,
) -> Result<TrainingSet, SamplingError> {
    if count == 0 {
        return Err(SamplingError::Invalid("count must be at least 1".into()));
    }
    noise.validate(spec.len())?;
    let aligned = dists.aligned(network)?;
    let solver = PowerFlowSolver::new(network);
    let model = MeasurementModel::new(network, spec)?;

    let draw = |k: u64| -> Result<Sample, PowerFlowError> {
        let mut rng = sample_rng(seed, k);
        let injection = sample_injections(&aligned, &mut rng);
        let state = solver.solve(&injection, &options.powerflow, None)?.state;
        let clean = model.evaluate(&state)?;
        let z = MeasurementVector::new(noise.add_to(&clean, &mut rng));
        Ok(Sample { index: k, injection, state, clean, z })
    };
    let results: Vec<Result<Sample, PowerFlowError>> = if options.threads == 0 {
        (0..count as u64).into_par_iter().map(draw).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| SamplingError::Invalid(e.to_string()))?
            .install(|| (0..count as u64).into_par_iter().map(draw).collect())
    };

    let mut samples = Vec::with_capacity(count);
    let mut failures = 0;
    let mut last = String::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                failures += 1;
                last = e.to_string();
            }
        }
    }
    if failures as f64 > options.max_failure_fraction * count as f64 {
        return Err(SamplingError::TooManyFailures {
            failures,
            attempted: count,
            limit: options.max_failure_fraction * 100.0,
            last,
        });
    }
    if failures > 0 {
        log::info!("{failures} of {count} samples skipped after power flow failure");
    }
    Ok(TrainingSet { samples, seed, spec: spec.clone(), attempted: count, failures })
}

/// Sensor placement: current-magnitude meters on a seeded `branch_fraction`
/// of branches (every phase) plus P and Q at every slack phase.
pub fn default_placement(network: &Network, branch_fraction: f64, seed: u64) -> MeasurementSpec {
    use crate::powerflow::Channel;
    let nb = network.branches().len();
    let chosen = ((branch_fraction * nb as f64).ceil() as usize).min(nb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, nb, chosen).into_vec();
    picks.sort_unstable();
    let mut channels = Vec::new();
    for b in picks {
        let from = network.branches()[b].from;
        for &phase in &network.bus(from).expect("validated").phases {
            channels.push(Channel::Imag { branch: b, phase });
        }
    }
    let slack = network.slack_bus();
    for &phase in &slack.phases {
        channels.push(Channel::Pinj { bus: slack.id, phase });
        channels.push(Channel::Qinj { bus: slack.id, phase });
    }
    MeasurementSpec::new(channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusKind};
    use crate::injection::DEFAULT_VARIANCE_FLOOR;
    use num_complex::Complex64;

    fn degenerate(mean: f64) -> GaussianMixture {
        GaussianMixture::gaussian(mean, DEFAULT_VARIANCE_FLOOR * 1e-6)
    }

    #[test]
    fn degenerate_draws_are_arithmetic() {
        let d = BusPhaseDistribution {
            bus: 2,
            phase: 1,
            load: degenerate(0.5),
            generation: Some(degenerate(0.2)),
            load_power_factor: 1.0,
            generation_power_factor: 1.0,
        };
        let mut rng = sample_rng(0, 0);
        let s = sample_injections(&[&d], &mut rng);
        assert!((s.p[0] + 0.3).abs() < 1e-6);
        assert!(s.q[0].abs() < 1e-9);
    }

    #[test]
    fn reactive_from_power_factor() {
        let d = BusPhaseDistribution::load_only(2, 1, degenerate(1.0));
        let mut rng = sample_rng(0, 0);
        let s = sample_injections(&[&d], &mut rng);
        let expected = -(0.95f64.acos().tan());
        assert!((s.q[0] - expected).abs() < 1e-6);
        assert!((s.q[0] + 0.3287).abs() < 1e-4);
    }

    fn feeder() -> Network {
        let y = Complex64::new(4.0, -8.0);
        Network::new(
            1,
            1.0,
            (1..=4)
                .map(|id| Bus { id, kind: if id == 1 { BusKind::Slack } else { BusKind::PQ }, phases: vec![1] })
                .collect(),
            vec![Branch::single(1, 2, y), Branch::single(2, 3, y), Branch::single(2, 4, y)],
        )
        .unwrap()
    }

    #[test]
    fn coverage_is_checked() {
        let net = feeder();
        let mut dists = ScenarioDistributions {
            entries: (2..=3).map(|b| BusPhaseDistribution::load_only(b, 1, GaussianMixture::gaussian(0.1, 1e-4))).collect(),
        };
        assert!(dists.aligned(&net).is_err());
        dists.entries.push(BusPhaseDistribution::load_only(1, 1, GaussianMixture::gaussian(0.1, 1e-4)));
        assert!(dists.aligned(&net).is_err());
        dists.entries.pop();
        dists.entries.push(BusPhaseDistribution::load_only(4, 1, GaussianMixture::gaussian(0.1, 1e-4)));
        let aligned = dists.aligned(&net).unwrap();
        assert_eq!(aligned.iter().map(|d| d.bus).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn placement_covers_fraction_and_slack() {
        let net = feeder();
        let spec = default_placement(&net, 0.2, 7);
        let currents = spec.channels.iter().filter(|c| matches!(c, crate::powerflow::Channel::Imag { .. })).count();
        assert_eq!(currents, 1);
        assert_eq!(spec.len(), 3);
    }

    #[test]
    fn zero_count_rejected() {
        let net = feeder();
        let dists = ScenarioDistributions {
            entries: (2..=4).map(|b| BusPhaseDistribution::load_only(b, 1, GaussianMixture::gaussian(0.1, 1e-4))).collect(),
        };
        let spec = default_placement(&net, 0.5, 1);
        let noise = NoiseModel::uniform(spec.len(), 0.0);
        assert!(generate_training_set(&net, &dists, &spec, &noise, 0, 1, &Default::default()).is_err());
    }
}

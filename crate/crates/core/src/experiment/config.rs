use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::baddata::WaldConfig;
use crate::injection::{ARModel, EmOptions};
use crate::nn::TrainConfig;
use crate::powerflow::MeasurementSpec;
use crate::sampling::{BadDataConfig, GenerationOptions, ScenarioDistributions};
use crate::wls::{PseudoConfig, WlsOptions};

/// One operating condition ("hour") with its own injection law and estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub distributions: ScenarioDistributions,
    /// Law of the past meter readings seen by the pseudo-measurement
    /// baselines; defaults to `distributions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<ScenarioDistributions>,
}

/// A scenario whose distributions are learned from a meter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnedConfig {
    pub name: String,
    pub meter_file: PathBuf,
    /// Fast intervals per meter reading.
    pub aggregation: usize,
    pub components: usize,
    /// Shared fast-timescale AR model; alternatively fitted from `ar_trace`.
    #[serde(default)]
    pub ar: Option<ARModel>,
    /// One value per line (header `value`) of a fast-timescale trace.
    #[serde(default)]
    pub ar_trace: Option<PathBuf>,
    #[serde(default)]
    pub ar_order: usize,
    #[serde(default)]
    pub em: EmOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementConfig {
    Spec(MeasurementSpec),
    Placement { branch_fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Sensor deviation as a fraction of the mean absolute net consumption.
    pub fraction: f64,
    /// Fixed sensor deviation; overrides `fraction`.
    pub sigma: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { fraction: 0.01, sigma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { train: 2000, validation: 1000, test: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub max_rounds: usize,
    /// Retraining settings; defaults to the main training config.
    pub retrain: Option<TrainConfig>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self { enabled: false, threshold: 0.0005, max_rounds: 5, retrain: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub pseudo: PseudoConfig,
    /// Fast intervals per past meter reading.
    pub aggregation: usize,
    /// Past readings generated per sample.
    pub history_readings: usize,
    pub regressor_hidden: Vec<usize>,
    pub regressor_train: TrainConfig,
    pub wls: WlsOptions,
    /// Level of the J(x) test.
    pub jx_level: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            pseudo: PseudoConfig::default(),
            aggregation: 4,
            history_readings: 4,
            regressor_hidden: vec![32],
            regressor_train: TrainConfig::default(),
            wls: WlsOptions::default(),
            jx_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub trials: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { trials: 200 }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64; 5]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network file; relative paths resolve against the config file.
    pub network: PathBuf,
    #[serde(default)]
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    pub learned: Option<LearnedConfig>,
    pub measurements: MeasurementConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub samples: SampleCounts,
    #[serde(default)]
    pub bad_data: BadDataConfig,
    #[serde(default)]
    pub wald: WaldConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub generation: GenerationOptions,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    /// Parse a config file and resolve its relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.network);
        resolve(&mut cfg.output);
        if let Some(l) = cfg.learned.as_mut() {
            resolve(&mut l.meter_file);
            if let Some(t) = l.ar_trace.as_mut() {
                resolve(t);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.scenarios.is_empty() && self.learned.is_none() {
            return err("at least one scenario (inline or learned) is required");
        }
        let mut names: Vec<&str> = self.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.extend(self.learned.iter().map(|l| l.name.as_str()));
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return err("scenario names must be unique");
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return err("scenario names must be non-empty and contain no path separators");
        }
        if self.samples.train == 0 || self.samples.validation == 0 || self.samples.test == 0 {
            return err("sample counts must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden layer widths must be positive");
        }
        if !(self.noise.fraction >= 0.0) || self.noise.sigma.is_some_and(|s| !(s >= 0.0)) {
            return err("noise settings must be non-negative");
        }
        self.bad_data.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(l) = &self.learned {
            if l.ar.is_none() && l.ar_trace.is_none() {
                return err("learned scenario needs `ar` or `ar_trace`");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization. The output directory is
    /// excluded: where results land does not change them.
    pub fn digest(&self) -> String {
        let canonical = Self { output: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Independent seed for a named purpose: the first 8 bytes of `SHA-256(seed ‖ tag)`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

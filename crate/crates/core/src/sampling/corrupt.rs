use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SamplingError;
use crate::powerflow::MeasurementVector;

/// Probabilistic gross-error model: each channel independently turns bad with
/// probability `probability`, its noise re-drawn with deviation `ratio · σ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BadDataConfig {
    pub probability: f64,
    pub ratio: f64,
    pub missing_probability: f64,
}

impl Default for BadDataConfig {
    fn default() -> Self {
        Self { probability: 0.0, ratio: 10.0, missing_probability: 0.0 }
    }
}

impl BadDataConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.probability) || !in_unit(self.missing_probability) {
            return Err(SamplingError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        if !(self.ratio > 1.0) {
            return Err(SamplingError::Invalid("bad-data ratio must exceed 1".into()));
        }
        Ok(())
    }
}

/// Corrupt `z`. Returns the corrupted vector and the ground-truth bad mask.
pub fn inject_bad_data<R: Rng + ?Sized>(
    z: &MeasurementVector,
    clean: &[f64],
    sigma0: &[f64],
    cfg: &BadDataConfig,
    rng: &mut R,
) -> Result<(MeasurementVector, Vec<bool>), SamplingError> {
    cfg.validate()?;
    if clean.len() != z.len() || sigma0.len() != z.len() {
        return Err(SamplingError::Invalid("clean values and deviations must align with z".into()));
    }
    let mut out = z.clone();
    let mut mask = vec![false; z.len()];
    for i in 0..z.len() {
        // One uniform per channel keeps the stream layout independent of the outcome.
        let u: f64 = rng.random();
        let e: f64 = StandardNormal.sample(rng);
        if u < cfg.probability {
            out.values[i] = clean[i] + cfg.ratio * sigma0[i] * e;
            mask[i] = true;
        }
    }
    Ok((out, mask))
}

/// Mark each channel missing with probability `rate`.
pub fn inject_missing<R: Rng + ?Sized>(
    z: &MeasurementVector,
    rate: f64,
    rng: &mut R,
) -> Result<MeasurementVector, SamplingError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(SamplingError::Invalid("missing rate must lie in [0, 1]".into()));
    }
    let mut out = z.clone();
    for v in out.valid.iter_mut() {
        let u: f64 = rng.random();
        if u < rate {
            *v = false;
        }
    }
    Ok(out)
}

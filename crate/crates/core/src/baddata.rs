//! Per-channel Wald screening against the Monte Carlo measurement marginals,
//! mean-replacement filtering, and the chi-square `J(x)` test for WLS.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::powerflow::{MeasurementSpec, MeasurementVector};
use crate::sampling::TrainingSet;

/// Samples required to estimate the channel marginals.
pub const MIN_H0_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum BadDataError {
    #[error("{got} samples supplied, at least {MIN_H0_SAMPLES} required")]
    TooFewSamples { got: usize },
    #[error("channel {0} has zero variance under H0")]
    DegenerateChannel(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("detection report: {0}")]
    Csv(#[from] csv::Error),
}

/// Mean and deviation of each clean measurement channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H0Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl H0Stats {
    /// Sample mean and (unbiased) deviation per column of `rows`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, BadDataError> {
        if rows.len() < MIN_H0_SAMPLES {
            return Err(BadDataError::TooFewSamples { got: rows.len() });
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(BadDataError::Dimension("rows have different lengths".into()));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..m).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..m)
            .map(|i| (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect();
        if let Some(i) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(BadDataError::DegenerateChannel(i));
        }
        Ok(Self { mean, std })
    }
}

pub fn estimate_h0_stats(set: &TrainingSet) -> Result<H0Stats, BadDataError> {
    H0Stats::from_rows(&set.measurements())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaldConfig {
    /// False-alarm level `a`.
    pub level: f64,
}

impl Default for WaldConfig {
    fn default() -> Self {
        Self { level: 0.05 }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `Φ⁻¹(1 − a/2)`.
pub fn wald_threshold(level: f64) -> Result<f64, BadDataError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(BadDataError::Invalid(format!("false-alarm level {level} outside (0, 1)")));
    }
    let n = std_normal();
    let tail = level / 2.0;
    let k = n.inverse_cdf(1.0 - tail);
    // One Newton step on the upper tail brings the quantile to full precision.
    Ok(k + (n.sf(k) - tail) / n.pdf(k))
}

/// Flag channel `i` iff `|z_i − μ_i| > Φ⁻¹(1 − a/2)·σ_i`. Missing channels are always flagged.
pub fn wald_detect(z: &MeasurementVector, stats: &H0Stats, cfg: &WaldConfig) -> Result<Vec<bool>, BadDataError> {
    if z.len() != stats.mean.len() {
        return Err(BadDataError::Dimension(format!("{} measurements, {} channel statistics", z.len(), stats.mean.len())));
    }
    let k = wald_threshold(cfg.level)?;
    Ok((0..z.len())
        .map(|i| !z.valid[i] || (z.values[i] - stats.mean[i]).abs() > k * stats.std[i])
        .collect())
}

/// Replace flagged and missing channels by their H0 mean; every channel is valid afterwards.
pub fn filter_bad(z: &MeasurementVector, mask: &[bool], stats: &H0Stats) -> Result<MeasurementVector, BadDataError> {
    if mask.len() != z.len() || stats.mean.len() != z.len() {
        return Err(BadDataError::Dimension("mask, statistics and measurements must align".into()));
    }
    let values = (0..z.len())
        .map(|i| if mask[i] || !z.valid[i] { stats.mean[i] } else { z.values[i] })
        .collect();
    Ok(MeasurementVector::new(values))
}

/// `2(1 − Φ(Φ⁻¹(1 − a/2)/r))`, evaluated through the upper tail: probability that a channel whose deviation is
/// `r` times the nominal one crosses the Wald threshold.
pub fn detection_probability(level: f64, ratio: f64) -> Result<f64, BadDataError> {
    if !(ratio > 0.0) {
        return Err(BadDataError::Invalid(format!("ratio {ratio} must be positive")));
    }
    let k = wald_threshold(level)?;
    Ok(2.0 * std_normal().sf(k / ratio))
}

/// `Σ w_i r_i²`.
pub fn jx_statistic(residual: &[f64], weights: &[f64]) -> f64 {
    residual.iter().zip(weights).map(|(r, w)| w * r * r).sum()
}

/// Upper-`a` quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_threshold(dof: i64, level: f64) -> Result<f64, BadDataError> {
    if dof <= 0 {
        return Err(BadDataError::Invalid(format!("J(x) test needs positive degrees of freedom, got {dof}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(BadDataError::Invalid(format!("level {level} outside (0, 1)")));
    }
    let chi = ChiSquared::new(dof as f64).map_err(|e| BadDataError::Invalid(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - level))
}

/// True iff the weighted residual sum of squares strictly exceeds the chi-square quantile.
pub fn jx_test(residual: &[f64], weights: &[f64], dof: i64, level: f64) -> Result<bool, BadDataError> {
    if residual.len() != weights.len() {
        return Err(BadDataError::Dimension("residuals and weights must align".into()));
    }
    Ok(jx_statistic(residual, weights) > chi_square_threshold(dof, level)?)
}

/// Flag counts against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub clean: u64,
    pub false_alarms: u64,
    pub bad: u64,
    pub detected: u64,
}

impl DetectionCounts {
    pub fn add(&mut self, flags: &[bool], truth: &[bool]) {
        for (&f, &t) in flags.iter().zip(truth) {
            if t {
                self.bad += 1;
                self.detected += f as u64;
            } else {
                self.clean += 1;
                self.false_alarms += f as u64;
            }
        }
    }

    pub fn false_alarm_rate(&self) -> Option<f64> {
        (self.clean > 0).then(|| self.false_alarms as f64 / self.clean as f64)
    }

    pub fn detection_rate(&self) -> Option<f64> {
        (self.bad > 0).then(|| self.detected as f64 / self.bad as f64)
    }
}

#[derive(Debug, Serialize)]
struct DetectionRow<'a> {
    sample: usize,
    channel: &'a str,
    value: f64,
    mu: f64,
    sigma0: f64,
    flagged: bool,
    truth: Option<bool>,
}

/// Per-sample, per-channel detection report.
pub fn write_detection_csv(
    path: impl AsRef<Path>,
    spec: &MeasurementSpec,
    stats: &H0Stats,
    rows: &[(MeasurementVector, Vec<bool>, Option<Vec<bool>>)],
) -> Result<(), BadDataError> {
    let labels: Vec<String> = spec.channels.iter().map(|c| c.label()).collect();
    let mut w = csv::Writer::from_path(path)?;
    for (k, (z, flags, truth)) in rows.iter().enumerate() {
        for i in 0..z.len() {
            w.serialize(DetectionRow {
                sample: k,
                channel: &labels[i],
                value: z.values[i],
                mu: stats.mean[i],
                sigma0: stats.std[i],
                flagged: flags[i],
                truth: truth.as_ref().map(|t| t[i]),
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

//! One-dimensional Gaussian mixtures fitted by expectation-maximization.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LearnError;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self, LearnError> {
        let g = Self { weights, means, variances };
        g.validate()?;
        Ok(g)
    }

    /// Single Gaussian component.
    pub fn gaussian(mean: f64, variance: f64) -> Self {
        Self { weights: vec![1.0], means: vec![mean], variances: vec![variance] }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(LearnError::InvalidMixture("component vectors must be non-empty and equal length".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(LearnError::InvalidMixture("weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LearnError::InvalidMixture(format!("weights sum to {total}")));
        }
        if self.variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(LearnError::InvalidMixture("variances must be positive".into()));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(LearnError::InvalidMixture("means must be finite".into()));
        }
        Ok(())
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (v + (m - mu) * (m - mu)))
            .sum()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.component_count())
            .map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.log_pdf(x)).sum()
    }

    /// Draw one value: pick a component by weight, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.component_count() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.variances[k].sqrt() * z
    }
}

/// Free-function form of [`GaussianMixture::sample`].
pub fn sample_mixture<R: Rng + ?Sized>(gmm: &GaussianMixture, rng: &mut R) -> f64 {
    gmm.sample(rng)
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * PI * var).ln() + d * d / var)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    /// Stop when the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Randomly initialized runs in addition to the quantile-seeded one.
    pub restarts: usize,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            restarts: 3,
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Total log-likelihood before every M-step of the winning run, then the final value.
    pub trace: Vec<f64>,
    /// Set when a component variance collapsed onto the floor.
    pub degenerate: bool,
}

/// Maximum-likelihood mixture fit; best of the quantile-seeded run and `restarts` random runs.
pub fn fit_gmm_em(samples: &[f64], k: usize, options: &EmOptions) -> Result<GmmFit, LearnError> {
    if k == 0 {
        return Err(LearnError::InvalidInput("component count must be at least 1".into()));
    }
    if samples.len() < k {
        return Err(LearnError::TooFewSamples { samples: samples.len(), required: k });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(LearnError::InvalidInput("samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<GmmFit> = None;
    for run in 0..=options.restarts {
        let centers: Vec<f64> = if run == 0 {
            (0..k)
                .map(|i| sorted[((i as f64 + 0.5) / k as f64 * samples.len() as f64) as usize])
                .collect()
        } else {
            let mut c: Vec<f64> = sample_indices(&mut rng, samples.len(), k)
                .into_iter()
                .map(|i| samples[i])
                .collect();
            c.sort_by(f64::total_cmp);
            c
        };
        let init = kmeans_init(samples, centers, options.variance_floor);
        let fit = run_em(samples, init, options);
        if best.as_ref().map_or(true, |b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
        if k == 1 {
            break;
        }
    }
    let fit = best.expect("at least one run");
    if fit.degenerate {
        log::warn!("mixture fit is degenerate: a component variance hit the floor");
    }
    Ok(fit)
}

fn kmeans_init(samples: &[f64], mut centers: Vec<f64>, floor: f64) -> GaussianMixture {
    let k = centers.len();
    let n = samples.len() as f64;
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..20 {
        for (a, &x) in assign.iter_mut().zip(samples) {
            *a = (0..k)
                .min_by(|&i, &j| (x - centers[i]).abs().total_cmp(&(x - centers[j]).abs()))
                .unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let (sum, cnt) = samples
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
            if cnt > 0 {
                *center = sum / cnt as f64;
            }
        }
    }
    let overall_mean = samples.iter().sum::<f64>() / n;
    let overall_var = samples.iter().map(|x| (x - overall_mean).powi(2)).sum::<f64>() / n;
    let mut weights = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for (c, &center) in centers.iter().enumerate() {
        let members: Vec<f64> = samples
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == c)
            .map(|(x, _)| *x)
            .collect();
        let var = if members.len() > 1 {
            members.iter().map(|x| (x - center).powi(2)).sum::<f64>() / members.len() as f64
        } else {
            overall_var
        };
        weights.push((members.len().max(1)) as f64);
        variances.push(var.max(floor));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussianMixture { weights, means: centers, variances }
}

fn run_em(samples: &[f64], mut g: GaussianMixture, options: &EmOptions) -> GmmFit {
    let n = samples.len();
    let k = g.component_count();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut prev_mean_ll = f64::NEG_INFINITY;
    let mut logs = vec![0.0; k];

    loop {
        // E-step
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            for c in 0..k {
                logs[c] = g.weights[c].ln() + log_normal(x, g.means[c], g.variances[c]);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logs[c] - lse).exp();
            }
        }
        trace.push(ll);
        let mean_ll = ll / n as f64;
        if iterations >= options.max_iter || mean_ll - prev_mean_ll < options.tol {
            break;
        }
        prev_mean_ll = mean_ll;

        // M-step
        let mut next = g.clone();
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-300 {
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + c] * samples[i]).sum::<f64>() / nk;
            let var = (0..n)
                .map(|i| resp[i * k + c] * (samples[i] - mean).powi(2))
                .sum::<f64>()
                / nk;
            next.weights[c] = nk / n as f64;
            next.means[c] = mean;
            next.variances[c] = var.max(options.variance_floor);
        }
        let total: f64 = next.weights.iter().sum();
        next.weights.iter_mut().for_each(|w| *w /= total);
        g = next;
        iterations += 1;
    }

    let degenerate = g.variances.iter().any(|&v| v <= options.variance_floor);
    let log_likelihood = *trace.last().expect("at least one E-step");
    GmmFit { mixture: g, log_likelihood, iterations, trace, degenerate }
}

//! Weighted least-squares estimation with injection pseudo-measurements.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::nn::{Mlp, NnError, Scaler};
use crate::powerflow::{Channel, MeasurementModel, MeasurementSpec, PowerFlowError, StateVector};

/// Singular values at or below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum WlsError {
    #[error("measurement Jacobian has rank {rank} < {state_dim} at iteration {iteration}")]
    RankDeficient { rank: usize, state_dim: usize, iteration: usize },
    #[error("WLS did not converge in {iterations} iterations (last step {step:.3e})")]
    NonConvergence { iterations: usize, step: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("consumption history: {0}")]
    History(String),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub rank: usize,
    pub state_dim: usize,
    pub observable: bool,
    pub singular_values: Vec<f64>,
}

/// Columns of the non-slack coordinates in [`MeasurementModel::jacobian`] order.
fn free_columns(network: &Network) -> Vec<usize> {
    let n = network.bus_phase_count();
    let free = network.free_indices();
    free.iter().copied().chain(free.iter().map(|&i| n + i)).collect()
}

fn rank_of(a: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let sv = a.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * max).count();
    let mut values: Vec<f64> = sv.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    (rank, values)
}

/// Numerical rank of the measurement Jacobian at the flat state, over the non-slack coordinates.
pub fn check_observability(network: &Network, spec: &MeasurementSpec) -> Result<ObservabilityReport, WlsError> {
    let model = MeasurementModel::new(network, spec)?;
    let full = model.jacobian(&StateVector::flat(network))?;
    let cols = free_columns(network);
    let state_dim = cols.len();
    let jac = full.select_columns(&cols);
    let (rank, singular_values) = if jac.nrows() == 0 { (0, vec![]) } else { rank_of(&jac) };
    Ok(ObservabilityReport { rank, state_dim, observable: rank == state_dim, singular_values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WlsOptions {
    pub max_iter: usize,
    /// Converged when the state update's ∞-norm falls below this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-8, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub state: StateVector,
    /// `z − h(x̂)`.
    pub residual: Vec<f64>,
    /// `Σ w r²`.
    pub objective: f64,
    pub iterations: usize,
}

/// Network-bound WLS solver for one (augmented) measurement spec.
#[derive(Debug, Clone)]
pub struct WlsSolver {
    model: MeasurementModel,
    free: Vec<usize>,
    columns: Vec<usize>,
}

fn objective(model: &MeasurementModel, z: &[f64], w: &[f64], x: &StateVector) -> Result<(f64, Vec<f64>), WlsError> {
    let h = model.evaluate(x)?;
    let r: Vec<f64> = z.iter().zip(&h).map(|(a, b)| a - b).collect();
    Ok((r.iter().zip(w).map(|(ri, wi)| wi * ri * ri).sum(), r))
}

impl WlsSolver {
    pub fn new(network: &Network, spec: &MeasurementSpec) -> Result<Self, WlsError> {
        Ok(Self { model: MeasurementModel::new(network, spec)?, free: network.free_indices(), columns: free_columns(network) })
    }

    /// Damped Gauss-Newton on `Σ w_i (z_i − h_i(x))²`. A step that raises the
    /// objective is halved up to `max_halvings` times; if none lowers it the
    /// iteration stops at the current point.
    pub fn solve(&self, z: &[f64], weights: &[f64], x0: &StateVector, opts: &WlsOptions) -> Result<WlsSolution, WlsError> {
        let m = self.model.channel_count();
        if z.len() != m || weights.len() != m {
            return Err(WlsError::Dimension(format!("{} values and {} weights for {m} channels", z.len(), weights.len())));
        }
        let nf = self.free.len();
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let mut x = x0.clone();
        let (mut obj, mut resid) = objective(&self.model, z, weights, &x)?;
        let mut iterations = 0;
        let mut last_step = f64::INFINITY;
        while iterations < opts.max_iter {
            let mut a = self.model.jacobian(&x)?.select_columns(&self.columns);
            for (r, s) in sqrt_w.iter().enumerate() {
                a.row_mut(r).scale_mut(*s);
            }
            let (rank, _) = rank_of(&a);
            if rank < 2 * nf {
                return Err(WlsError::RankDeficient { rank, state_dim: 2 * nf, iteration: iterations });
            }
            let b = DVector::from_iterator(m, resid.iter().zip(&sqrt_w).map(|(r, s)| r * s));
            let gram = a.transpose() * &a;
            let rhs = a.transpose() * b;
            let dx = gram
                .cholesky()
                .ok_or(WlsError::RankDeficient { rank, state_dim: 2 * nf, iteration: iterations })?
                .solve(&rhs);
            let step = dx.amax();
            if step < opts.tol {
                last_step = step;
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let mut trial = x.clone();
                for (r, &i) in self.free.iter().enumerate() {
                    trial.angle[i] += alpha * dx[r];
                    trial.magnitude[i] += alpha * dx[nf + r];
                }
                if trial.magnitude.iter().all(|&v| v > 0.0) {
                    let (o, r) = objective(&self.model, z, weights, &trial)?;
                    if o <= obj {
                        accepted = Some((trial, o, r));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((trial, o, r)) = accepted else {
                last_step = 0.0;
                break;
            };
            x = trial;
            obj = o;
            resid = r;
            iterations += 1;
            last_step = alpha * step;
            if last_step < opts.tol {
                break;
            }
        }
        if last_step >= opts.tol {
            return Err(WlsError::NonConvergence { iterations, step: last_step });
        }
        Ok(WlsSolution { state: x, residual: resid, objective: obj, iterations })
    }
}

/// One-shot [`WlsSolver::solve`].
pub fn wls_solve(
    network: &Network,
    z: &[f64],
    spec: &MeasurementSpec,
    weights: &[f64],
    x0: &StateVector,
    opts: &WlsOptions,
) -> Result<WlsSolution, WlsError> {
    WlsSolver::new(network, spec)?.solve(z, weights, x0, opts)
}

/// Net-consumption energy readings (oldest first) per non-slack bus-phase,
/// aligned with [`Network::free_indices`]. Each reading covers `aggregation`
/// fast intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionHistory {
    pub aggregation: usize,
    pub readings: Vec<Vec<f64>>,
}

impl ConsumptionHistory {
    fn window(&self, window: usize) -> Result<Vec<&[f64]>, WlsError> {
        if window == 0 || self.aggregation == 0 {
            return Err(WlsError::History("window and aggregation must be at least 1".into()));
        }
        self.readings
            .iter()
            .map(|r| {
                if r.len() < window {
                    Err(WlsError::History(format!("{} readings available, window is {window}", r.len())))
                } else {
                    Ok(&r[r.len() - window..])
                }
            })
            .collect()
    }

    /// The last `window` readings of every bus-phase, concatenated.
    pub fn features(&self, window: usize) -> Result<Vec<f64>, WlsError> {
        Ok(self.window(window)?.concat())
    }
}

/// Injection pseudo-measurements at every non-slack bus-phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoMeasurementSet {
    pub channels: Vec<Channel>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Pseudo deviation as a multiple of the sensor deviation.
    pub sigma_factor: f64,
    pub power_factor: f64,
    /// Meter readings averaged (or fed to the regressor).
    pub window: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { sigma_factor: 10.0, power_factor: 0.95, window: 4 }
    }
}

impl PseudoMeasurementSet {
    /// P and Q channels from net active injections `p` (generation positive).
    pub fn from_active(network: &Network, p: &[f64], sigma: f64, power_factor: f64) -> Result<Self, WlsError> {
        let bps = network.bus_phases();
        let free = network.free_indices();
        if p.len() != free.len() {
            return Err(WlsError::Dimension(format!("{} injections for {} bus-phases", p.len(), free.len())));
        }
        let tan = power_factor.acos().tan();
        let mut channels = Vec::with_capacity(2 * p.len());
        let mut values = Vec::with_capacity(2 * p.len());
        for (&i, &pi) in free.iter().zip(p) {
            let bp = bps[i];
            channels.push(Channel::Pinj { bus: bp.bus, phase: bp.phase });
            values.push(pi);
            channels.push(Channel::Qinj { bus: bp.bus, phase: bp.phase });
            values.push(pi * tan);
        }
        Ok(Self { sigma: vec![sigma; values.len()], channels, values })
    }

    /// `spec` followed by the pseudo channels.
    pub fn augment(&self, spec: &MeasurementSpec) -> MeasurementSpec {
        let mut channels = spec.channels.clone();
        channels.extend(self.channels.iter().cloned());
        MeasurementSpec::new(channels)
    }

    /// Measurement values and weights `1/σ²` for the augmented spec.
    pub fn augment_values(&self, z: &[f64], sensor_sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut values = z.to_vec();
        values.extend_from_slice(&self.values);
        let weights = sensor_sigma.iter().chain(&self.sigma).map(|s| 1.0 / (s * s)).collect();
        (values, weights)
    }
}

/// Pseudo injections from the windowed mean of past consumption, per fast interval.
pub fn pseudo_avg(network: &Network, history: &ConsumptionHistory, sigma: f64, cfg: &PseudoConfig) -> Result<PseudoMeasurementSet, WlsError> {
    let t = history.aggregation as f64;
    let p: Vec<f64> = history
        .window(cfg.window)?
        .iter()
        .map(|w| -(w.iter().sum::<f64>() / w.len() as f64) / t)
        .collect();
    PseudoMeasurementSet::from_active(network, &p, sigma, cfg.power_factor)
}

/// Regressor from history features to net active injections.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionRegressor {
    pub mlp: Mlp,
    pub scaler: Scaler,
    pub window: usize,
}

impl InjectionRegressor {
    pub fn predict(&self, history: &ConsumptionHistory) -> Result<Vec<f64>, WlsError> {
        let f = history.features(self.window)?;
        let y = self.mlp.forward(&self.scaler.scale_input(&f))?;
        Ok(self.scaler.unscale_target(&y))
    }
}

/// Pseudo injections predicted by `regressor` from the consumption history.
pub fn pseudo_nn(
    network: &Network,
    history: &ConsumptionHistory,
    regressor: &InjectionRegressor,
    sigma: f64,
    cfg: &PseudoConfig,
) -> Result<PseudoMeasurementSet, WlsError> {
    let p = regressor.predict(history)?;
    PseudoMeasurementSet::from_active(network, &p, sigma, cfg.power_factor)
}

//! Measurement function `h(x)` and the injection-to-state map `g(s)`.
//!
//! States are polar (`V`, `θ`) per bus-phase in the network's bus-phase
//! numbering. Injections are net complex power per non-slack bus-phase,
//! generation positive.

mod measurement;
mod newton;

pub use measurement::{
    branch_end_current, branch_end_power, evaluate_h, measurement_jacobian, Channel, ChannelKind,
    MeasurementModel, MeasurementSpec, MeasurementVector,
};
pub use newton::{solve_powerflow, PowerFlowOptions, PowerFlowSolution, PowerFlowSolver};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{reference_angle, Network};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown channel reference: {0}")]
    UnknownChannel(String),
    #[error("power flow did not converge in {iterations} iterations (max mismatch {mismatch:.3e})")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("power flow Jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// Voltage magnitude and angle for every bus-phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub magnitude: Vec<f64>,
    pub angle: Vec<f64>,
}

impl StateVector {
    /// Flat profile: every magnitude 1.0, every angle at its phase reference.
    pub fn flat(network: &Network) -> Self {
        Self::flat_with_slack(network, 1.0)
    }

    pub fn flat_with_slack(network: &Network, slack_voltage: f64) -> Self {
        let slack = network.slack_mask();
        let bps = network.bus_phases();
        Self {
            magnitude: slack
                .iter()
                .map(|&s| if s { slack_voltage } else { 1.0 })
                .collect(),
            angle: bps.iter().map(|bp| reference_angle(bp.phase)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(&self.angle)
            .map(|(&v, &t)| Complex64::from_polar(v, t))
            .collect()
    }

    /// Flattened `[V..., θ...]` coordinates; used by the ASE metric and CSV output.
    pub fn to_coordinates(&self) -> Vec<f64> {
        let mut out = self.magnitude.clone();
        out.extend_from_slice(&self.angle);
        out
    }

    pub fn from_coordinates(coords: &[f64]) -> Self {
        let n = coords.len() / 2;
        Self {
            magnitude: coords[..n].to_vec(),
            angle: coords[n..].to_vec(),
        }
    }

    pub(crate) fn check(&self, network: &Network) -> Result<(), PowerFlowError> {
        let n = network.bus_phase_count();
        if self.magnitude.len() != n || self.angle.len() != n {
            return Err(PowerFlowError::Dimension(format!(
                "state has {}/{} entries, network has {n} bus-phases",
                self.magnitude.len(),
                self.angle.len()
            )));
        }
        Ok(())
    }
}

/// Net injection per non-slack bus-phase, aligned with [`Network::free_indices`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(network: &Network) -> Self {
        let n = network.free_indices().len();
        Self { p: vec![0.0; n], q: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Net injections `S(x)` at the non-slack bus-phases.
pub fn injections_of(network: &Network, state: &StateVector) -> Result<InjectionVector, PowerFlowError> {
    state.check(network)?;
    let y = crate::grid::build_ybus(network).0;
    let v = state.phasors();
    let current = &y * nalgebra::DVector::from_vec(v.clone());
    let (p, q) = network
        .free_indices()
        .into_iter()
        .map(|i| {
            let s = v[i] * current[i].conj();
            (s.re, s.im)
        })
        .unzip();
    Ok(InjectionVector { p, q })
}

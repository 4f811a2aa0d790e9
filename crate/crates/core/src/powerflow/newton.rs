//! Polar Newton-Raphson power flow with the full analytic Jacobian.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{InjectionVector, PowerFlowError, StateVector};
use crate::grid::{build_ybus, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowOptions {
    /// Maximum absolute P/Q mismatch (per-unit) accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub flat_start: bool,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, flat_start: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    /// Newton corrections applied.
    pub iterations: usize,
    pub mismatch: f64,
}

/// Network-bound solver; holds the admittance matrix so repeated solves skip assembly.
#[derive(Debug, Clone)]
pub struct PowerFlowSolver {
    y: DMatrix<Complex64>,
    free: Vec<usize>,
    flat: StateVector,
}

impl PowerFlowSolver {
    pub fn new(network: &Network) -> Self {
        Self {
            y: build_ybus(network).0,
            free: network.free_indices(),
            flat: StateVector::flat(network),
        }
    }

    pub fn flat_state(&self) -> &StateVector {
        &self.flat
    }

    /// Solve from the flat profile, or from `initial` when `flat_start` is off.
    pub fn solve(
        &self,
        s: &InjectionVector,
        options: &PowerFlowOptions,
        initial: Option<&StateVector>,
    ) -> Result<PowerFlowSolution, PowerFlowError> {
        if !(options.tol > 0.0) {
            return Err(PowerFlowError::InvalidOption("tol must be positive".into()));
        }
        let nf = self.free.len();
        if s.p.len() != nf || s.q.len() != nf {
            return Err(PowerFlowError::Dimension(format!(
                "injection has {} entries, network has {nf} free bus-phases",
                s.p.len()
            )));
        }
        let mut state = match (options.flat_start, initial) {
            (false, Some(x0)) => {
                if x0.len() != self.flat.len() {
                    return Err(PowerFlowError::Dimension("initial state size".into()));
                }
                let mut x = x0.clone();
                // slack stays pinned regardless of the warm start
                for i in 0..x.len() {
                    if !self.free.contains(&i) {
                        x.magnitude[i] = self.flat.magnitude[i];
                        x.angle[i] = self.flat.angle[i];
                    }
                }
                x
            }
            _ => self.flat.clone(),
        };

        let mut iterations = 0;
        loop {
            let v = state.phasors();
            let current = &self.y * DVector::from_vec(v.clone());
            let mut f = DVector::zeros(2 * nf);
            for (r, &i) in self.free.iter().enumerate() {
                let si = v[i] * current[i].conj();
                f[r] = si.re - s.p[r];
                f[nf + r] = si.im - s.q[r];
            }
            let mismatch = f.amax();
            if !mismatch.is_finite() {
                return Err(PowerFlowError::NonConvergence { iterations, mismatch });
            }
            if mismatch < options.tol {
                return Ok(PowerFlowSolution { state, iterations, mismatch });
            }
            if iterations >= options.max_iter {
                return Err(PowerFlowError::NonConvergence { iterations, mismatch });
            }

            let jac = self.injection_jacobian(&v, &state.magnitude, current.as_slice());
            let dx = jac
                .lu()
                .solve(&f)
                .ok_or(PowerFlowError::SingularJacobian { iteration: iterations })?;
            if dx.iter().any(|d| !d.is_finite()) {
                return Err(PowerFlowError::SingularJacobian { iteration: iterations });
            }
            for (r, &i) in self.free.iter().enumerate() {
                state.angle[i] -= dx[r];
                state.magnitude[i] -= dx[nf + r];
            }
            iterations += 1;
            if state.magnitude.iter().any(|&m| !(m > 0.0)) {
                return Err(PowerFlowError::NonConvergence { iterations, mismatch });
            }
        }
    }

    /// `[[∂P/∂θ, ∂P/∂V], [∂Q/∂θ, ∂Q/∂V]]` restricted to free bus-phases.
    fn injection_jacobian(&self, v: &[Complex64], vm: &[f64], current: &[Complex64]) -> DMatrix<f64> {
        let nf = self.free.len();
        let j = Complex64::new(0.0, 1.0);
        let mut jac = DMatrix::zeros(2 * nf, 2 * nf);
        for (r, &i) in self.free.iter().enumerate() {
            for (c, &m) in self.free.iter().enumerate() {
                let y = self.y[(i, m)];
                let unit = v[m] / vm[m];
                // dS_i/dθ_m = j v_i conj(δ_im I_i - Y_im v_m)
                // dS_i/dV_m = v_i conj(Y_im unit_m) + δ_im conj(I_i) unit_m
                let mut ds_dt = j * v[i] * (-(y * v[m])).conj();
                let mut ds_dv = v[i] * (y * unit).conj();
                if i == m {
                    ds_dt += j * v[i] * current[i].conj();
                    ds_dv += current[i].conj() * unit;
                }
                jac[(r, c)] = ds_dt.re;
                jac[(r, nf + c)] = ds_dv.re;
                jac[(nf + r, c)] = ds_dt.im;
                jac[(nf + r, nf + c)] = ds_dv.im;
            }
        }
        jac
    }
}

/// Solve `x = g(s)`: the state whose non-slack injections equal `s`.
pub fn solve_powerflow(
    network: &Network,
    s: &InjectionVector,
    options: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    PowerFlowSolver::new(network).solve(s, options, None)
}

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::nn::Estimator;
use crate::powerflow::{MeasurementVector, StateVector};
use crate::wls::{WlsOptions, WlsSolver};

/// WLS problems to time: an augmented solver and `(values, weights)` per case.
pub struct WlsBench<'a> {
    pub solver: &'a WlsSolver,
    pub cases: &'a [(Vec<f64>, Vec<f64>)],
    pub x0: &'a StateVector,
    pub options: WlsOptions,
}

/// Median single-estimate latencies in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub trials: usize,
    pub nn_seconds: f64,
    pub wls_seconds: f64,
    /// `wls_seconds / nn_seconds`.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `trials` NN estimates and `trials` WLS solves, cycling through the
/// supplied inputs. Failed WLS solves are timed like successful ones.
pub fn benchmark_latency(
    estimator: &Estimator,
    inputs: &[MeasurementVector],
    wls: &WlsBench<'_>,
    trials: usize,
) -> Result<LatencyTable, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::Benchmark("trials must be at least 1".into()));
    }
    if inputs.is_empty() || wls.cases.is_empty() {
        return Err(ExperimentError::Benchmark("no inputs to time".into()));
    }
    // Warm caches and surface input errors before timing.
    estimator.estimate(&inputs[0]).map_err(|e| ExperimentError::Benchmark(e.to_string()))?;

    let mut nn = Vec::with_capacity(trials);
    for t in 0..trials {
        let z = &inputs[t % inputs.len()];
        let start = Instant::now();
        let x = estimator.estimate(black_box(z));
        nn.push(start.elapsed().as_secs_f64());
        black_box(x).map_err(|e| ExperimentError::Benchmark(e.to_string()))?;
    }
    let mut solves = Vec::with_capacity(trials);
    for t in 0..trials {
        let (z, w) = &wls.cases[t % wls.cases.len()];
        let start = Instant::now();
        let x = wls.solver.solve(black_box(z), w, wls.x0, &wls.options);
        solves.push(start.elapsed().as_secs_f64());
        let _ = black_box(x);
    }
    let nn_seconds = median(nn);
    let wls_seconds = median(solves);
    Ok(LatencyTable { trials, nn_seconds, wls_seconds, ratio: wls_seconds / nn_seconds })
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{fit_regressor, Mlp, NnError, Scaler, TrainConfig, TrainReport};
use crate::grid::Network;
use crate::powerflow::{MeasurementVector, StateVector};
use crate::sampling::TrainingSet;

/// Maps network states to regression targets `[V_free..., θ_free...]` and back.
/// Slack entries are fixed and re-attached from `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub free: Vec<usize>,
    pub reference: StateVector,
}

impl StateLayout {
    pub fn new(network: &Network) -> Self {
        Self { free: network.free_indices(), reference: StateVector::flat(network) }
    }

    pub fn target_dim(&self) -> usize {
        2 * self.free.len()
    }

    pub fn targets(&self, x: &StateVector) -> Vec<f64> {
        let mut t: Vec<f64> = self.free.iter().map(|&i| x.magnitude[i]).collect();
        t.extend(self.free.iter().map(|&i| x.angle[i]));
        t
    }

    pub fn assemble(&self, targets: &[f64]) -> StateVector {
        let nf = self.free.len();
        let mut x = self.reference.clone();
        for (r, &i) in self.free.iter().enumerate() {
            x.magnitude[i] = targets[r];
            x.angle[i] = targets[nf + r];
        }
        x
    }
}

/// Trained network with its scaler and state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub mlp: Mlp,
    pub scaler: Scaler,
    pub layout: StateLayout,
}

impl Estimator {
    fn check(&self, z: &MeasurementVector) -> Result<(), NnError> {
        if z.len() != self.mlp.input_dim() {
            return Err(NnError::Dimension(format!(
                "{} measurements, estimator expects {}",
                z.len(),
                self.mlp.input_dim()
            )));
        }
        if let Some(i) = z.valid.iter().position(|v| !v) {
            return Err(NnError::MissingChannel(i));
        }
        Ok(())
    }

    pub fn estimate(&self, z: &MeasurementVector) -> Result<StateVector, NnError> {
        self.check(z)?;
        let y = self.mlp.forward(&self.scaler.scale_input(&z.values))?;
        Ok(self.layout.assemble(&self.scaler.unscale_target(&y)))
    }

    pub fn estimate_batch(&self, zs: &[MeasurementVector]) -> Result<Vec<StateVector>, NnError> {
        for z in zs {
            self.check(z)?;
        }
        let d = self.mlp.input_dim();
        let inputs = DMatrix::from_iterator(d, zs.len(), zs.iter().flat_map(|z| self.scaler.scale_input(&z.values)));
        let out = self.mlp.forward_batch(&inputs)?;
        Ok(out
            .column_iter()
            .map(|c| self.layout.assemble(&self.scaler.unscale_target(c.as_slice())))
            .collect())
    }

    /// Scaled validation inputs and targets for `set`.
    pub fn scaled_data(&self, set: &TrainingSet) -> Result<(DMatrix<f64>, DMatrix<f64>), NnError> {
        let (z, x) = split(set, &self.layout);
        self.scaler.scaled_matrices(&z, &x)
    }
}

fn split(set: &TrainingSet, layout: &StateLayout) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    set.samples.iter().map(|s| (s.z.values.clone(), layout.targets(&s.state))).unzip()
}

/// Train an estimator `z ↦ x` on `train`, early-stopping on `val`.
pub fn fit_state_estimator(
    network: &Network,
    train: &TrainingSet,
    val: &TrainingSet,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(Estimator, TrainReport), NnError> {
    if train.spec != val.spec {
        return Err(NnError::Dimension("training and validation sets use different measurement specs".into()));
    }
    let layout = StateLayout::new(network);
    let (tz, tx) = split(train, &layout);
    let (vz, vx) = split(val, &layout);
    let (mlp, scaler, report) = fit_regressor(&tz, &tx, &vz, &vx, hidden, cfg)?;
    Ok((Estimator { mlp, scaler, layout }, report))
}

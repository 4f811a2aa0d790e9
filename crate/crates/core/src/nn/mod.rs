//! Fully connected ReLU network `x̂ = K(z; w)` and its training.

mod estimator;
mod file;
mod train;

pub use estimator::{fit_state_estimator, Estimator, StateLayout};
pub use file::{load_estimator, save_estimator, ModelManifest};
pub use train::{
    backward, fit_regressor, loss, train_model, Adam, Gradients, Scaler, TrainConfig, TrainReport, STD_FLOOR,
};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("channel {0} is marked missing; impute before estimating")]
    MissingChannel(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Rows are neurons, columns the previous layer's outputs.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

pub(crate) fn relu_in_place(m: &mut DMatrix<f64>) {
    m.iter_mut().for_each(|v| *v = v.max(0.0));
}

impl Mlp {
    /// Hidden layers must be ReLU, the output layer Linear, and widths must chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Dimension("network needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() || l.outputs() == 0 || l.inputs() == 0 {
                return Err(NnError::Dimension(format!("layer {k} bias or size invalid")));
            }
            let last = k + 1 == layers.len();
            let expected = if last { Activation::Linear } else { Activation::Relu };
            if l.activation != expected {
                return Err(NnError::Dimension(format!("layer {k} must be {expected:?}")));
            }
            if k > 0 && layers[k - 1].outputs() != l.inputs() {
                return Err(NnError::Dimension(format!(
                    "layer {k} takes {} inputs, previous layer has {} outputs",
                    l.inputs(),
                    layers[k - 1].outputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs()];
        d.extend(self.layers.iter().map(Layer::outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn hidden_neurons(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(Layer::outputs).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters layer by layer: weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            for r in 0..l.outputs() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.parameter_count() {
            return Err(NnError::Dimension(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.outputs() {
                for c in 0..l.inputs() {
                    l.weights[(r, c)] = it.next().expect("counted");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("counted");
            }
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        if z.len() != self.input_dim() {
            return Err(NnError::Dimension(format!(
                "input has {} entries, network expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        let mut a = z.to_vec();
        for l in &self.layers {
            let mut next = l.bias.as_slice().to_vec();
            let rows = next.len();
            // Column-major axpy; columns of zero inputs (inactive ReLUs) are skipped.
            for (col, &aj) in l.weights.as_slice().chunks_exact(rows).zip(&a) {
                if aj != 0.0 {
                    next.iter_mut().zip(col).for_each(|(o, w)| *o += w * aj);
                }
            }
            if l.activation == Activation::Relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = next;
        }
        Ok(a)
    }

    /// Columns of `inputs` are samples.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        Ok(self.activations(inputs)?.pop().expect("non-empty"))
    }

    /// Post-activation outputs of every layer, input excluded.
    pub fn activations(&self, inputs: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, NnError> {
        if inputs.nrows() != self.input_dim() {
            return Err(NnError::Dimension(format!(
                "batch has {} rows, network expects {}",
                inputs.nrows(),
                self.input_dim()
            )));
        }
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let prev = out.last().unwrap_or(inputs);
            let mut pre = &l.weights * prev;
            for mut col in pre.column_iter_mut() {
                col += &l.bias;
            }
            if l.activation == Activation::Relu {
                relu_in_place(&mut pre);
            }
            out.push(pre);
        }
        Ok(out)
    }
}

/// He-normal weights `N(0, 2/fan_in)`, zero biases. `dims = [input, hidden..., output]`.
pub fn init_he(dims: &[usize], seed: u64) -> Result<Mlp, NnError> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NnError::Dimension(format!("invalid layer widths {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive deviation");
            Layer {
                weights: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(&mut rng)),
                bias: DVector::zeros(w[1]),
                activation: if k + 2 == dims.len() { Activation::Linear } else { Activation::Relu },
            }
        })
        .collect();
    Mlp::new(layers)
}

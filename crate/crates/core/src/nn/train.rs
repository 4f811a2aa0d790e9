//! Empirical-risk training: squared-error loss, reverse-mode gradients, Adam,
//! and early stopping on validation loss.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{init_he, Activation, Mlp, NnError};

/// Lower bound on every scaler deviation.
pub const STD_FLOOR: f64 = 1e-12;

/// Samples per partial gradient in the parallel mode. Fixed so the reduction
/// order does not depend on the worker count.
const PARALLEL_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub parallel_gradients: bool,
    /// Probability that a training input entry is replaced by its scaled
    /// mean (0) in each minibatch, matching inputs repaired by the bad-data filter.
    pub mean_impute_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            parallel_gradients: false,
            mean_impute_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NnError::Config("batch size and max epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(NnError::Config("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.mean_impute_rate) {
            return Err(NnError::Config("mean imputation rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }

    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

/// Per-feature standardization of inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect())
}

impl Scaler {
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self, NnError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(NnError::Dimension("scaler needs equally many non-zero inputs and targets".into()));
        }
        let (input_mean, input_std) = moments(inputs);
        let (target_mean, target_std) = moments(targets);
        Ok(Self { input_mean, input_std, target_mean, target_std })
    }

    pub fn scale_input(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.input_mean).zip(&self.input_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn scale_target(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.target_mean).zip(&self.target_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn unscale_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.target_mean).zip(&self.target_std).map(|((v, m), s)| v * s + m).collect()
    }

    fn check(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(), NnError> {
        let bad_in = inputs.iter().any(|r| r.len() != self.input_mean.len());
        let bad_out = targets.iter().any(|r| r.len() != self.target_mean.len());
        if bad_in || bad_out || inputs.len() != targets.len() || inputs.is_empty() {
            return Err(NnError::Dimension("rows do not match the scaler".into()));
        }
        Ok(())
    }

    /// Scaled inputs and targets as column-per-sample matrices.
    pub fn scaled_matrices(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), NnError> {
        self.check(inputs, targets)?;
        let cols = |rows: Vec<Vec<f64>>, d: usize| {
            DMatrix::from_iterator(d, rows.len(), rows.into_iter().flatten())
        };
        let zi = cols(inputs.iter().map(|r| self.scale_input(r)).collect(), self.input_mean.len());
        let yi = cols(targets.iter().map(|r| self.scale_target(r)).collect(), self.target_mean.len());
        Ok((zi, yi))
    }
}

/// `(1/B) Σ_k ‖y_k − K(z_k)‖²` over the columns of `inputs`/`targets`.
pub fn loss(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64, NnError> {
    let out = mlp.forward_batch(inputs)?;
    check_targets(&out, targets)?;
    Ok((out - targets).norm_squared() / targets.ncols() as f64)
}

fn check_targets(out: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(), NnError> {
    if out.shape() != targets.shape() || targets.ncols() == 0 {
        return Err(NnError::Dimension(format!(
            "targets are {:?}, network produces {:?}",
            targets.shape(),
            out.shape()
        )));
    }
    Ok(())
}

/// Gradient with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers().iter().map(|l| DMatrix::zeros(l.outputs(), l.inputs())).collect(),
            biases: mlp.layers().iter().map(|l| DVector::zeros(l.outputs())).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b * s;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b * s;
        }
    }

    /// Flattened in [`Mlp::parameters`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }
}

/// Loss and its gradient. The ReLU derivative at zero is taken as zero.
pub fn backward(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Gradients), NnError> {
    let acts = mlp.activations(inputs)?;
    let out = acts.last().expect("non-empty");
    check_targets(out, targets)?;
    let b = targets.ncols() as f64;
    let resid = out - targets;
    let value = resid.norm_squared() / b;
    let layers = mlp.layers();
    let mut grads = Gradients::zeros_like(mlp);
    let mut delta = resid * (2.0 / b);
    for k in (0..layers.len()).rev() {
        if layers[k].activation == Activation::Relu {
            delta.zip_apply(&acts[k], |d, a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let prev = if k == 0 { inputs } else { &acts[k - 1] };
        grads.weights[k] = &delta * prev.transpose();
        grads.biases[k] = delta.column_sum();
        if k > 0 {
            delta = layers[k].weights.transpose() * &delta;
        }
    }
    Ok((value, grads))
}

fn backward_chunked(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Gradients), NnError> {
    let n = inputs.ncols();
    let starts: Vec<usize> = (0..n).step_by(PARALLEL_CHUNK).collect();
    let parts: Vec<Result<(f64, Gradients, usize), NnError>> = starts
        .par_iter()
        .map(|&s| {
            let len = PARALLEL_CHUNK.min(n - s);
            let zi = inputs.columns(s, len).into_owned();
            let yi = targets.columns(s, len).into_owned();
            backward(mlp, &zi, &yi).map(|(l, g)| (l, g, len))
        })
        .collect();
    let mut total = Gradients::zeros_like(mlp);
    let mut value = 0.0;
    for p in parts {
        let (l, g, len) = p?;
        let w = len as f64 / n as f64;
        value += l * w;
        total.add_scaled(&g, w);
    }
    Ok((value, total))
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl Adam {
    pub fn new(mlp: &Mlp, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: Gradients::zeros_like(mlp),
            v: Gradients::zeros_like(mlp),
        }
    }

    pub fn apply(&mut self, mlp: &mut Mlp, g: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, layer) in mlp.layers_mut().iter_mut().enumerate() {
            let ws = layer.weights.iter_mut().zip(self.m.weights[k].iter_mut()).zip(self.v.weights[k].iter_mut());
            for (((w, m), v), &gk) in ws.zip(g.weights[k].iter()) {
                update(w, m, v, gk);
            }
            let bs = layer.bias.iter_mut().zip(self.m.biases[k].iter_mut()).zip(self.v.biases[k].iter_mut());
            for (((w, m), v), &gk) in bs.zip(g.biases[k].iter()) {
                update(w, m, v, gk);
            }
        }
    }
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Train `mlp` on already-scaled column-per-sample data. Returns the weights
/// from the epoch with the lowest validation loss.
pub fn train_model(
    mut mlp: Mlp,
    train: (&DMatrix<f64>, &DMatrix<f64>),
    val: (&DMatrix<f64>, &DMatrix<f64>),
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainReport), NnError> {
    cfg.validate()?;
    let (tz, ty) = train;
    let n = tz.ncols();
    if n == 0 || ty.ncols() != n || val.0.ncols() == 0 || val.0.ncols() != val.1.ncols() {
        return Err(NnError::Dimension("training and validation sets must be non-empty and aligned".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut impute_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    impute_rng.set_stream(1);
    let mut adam = Adam::new(&mlp, cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport { train_loss: vec![], val_loss: vec![], best_epoch: 0, stopped_epoch: 0, epoch_seconds: vec![] };
    let mut best = (f64::INFINITY, mlp.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut zb = select_columns(tz, idx);
            if cfg.mean_impute_rate > 0.0 {
                for v in zb.iter_mut() {
                    if impute_rng.random::<f64>() < cfg.mean_impute_rate {
                        *v = 0.0;
                    }
                }
            }
            let yb = select_columns(ty, idx);
            let (l, g) = if cfg.parallel_gradients {
                backward_chunked(&mlp, &zb, &yb)?
            } else {
                backward(&mlp, &zb, &yb)?
            };
            if !l.is_finite() {
                return Err(NnError::Divergence { epoch, loss: l });
            }
            epoch_loss += l * idx.len() as f64 / n as f64;
            adam.apply(&mut mlp, &g);
        }
        let v = loss(&mlp, val.0, val.1)?;
        if !v.is_finite() {
            return Err(NnError::Divergence { epoch, loss: v });
        }
        report.train_loss.push(epoch_loss);
        report.val_loss.push(v);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        report.stopped_epoch = epoch;
        if v < best.0 {
            best = (v, mlp.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, report))
}

/// Fit a scaler, He-initialise `[input, hidden..., output]` and train.
pub fn fit_regressor(
    train_inputs: &[Vec<f64>],
    train_targets: &[Vec<f64>],
    val_inputs: &[Vec<f64>],
    val_targets: &[Vec<f64>],
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(Mlp, Scaler, TrainReport), NnError> {
    let scaler = Scaler::fit(train_inputs, train_targets)?;
    let (tz, ty) = scaler.scaled_matrices(train_inputs, train_targets)?;
    let (vz, vy) = scaler.scaled_matrices(val_inputs, val_targets)?;
    let mut dims = vec![tz.nrows()];
    dims.extend_from_slice(hidden);
    dims.push(ty.nrows());
    let mlp = init_he(&dims, cfg.seed)?;
    let (mlp, report) = train_model(mlp, (&tz, &ty), (&vz, &vy), cfg)?;
    Ok((mlp, scaler, report))
}

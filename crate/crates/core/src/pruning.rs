//! Correlation clustering of hidden neurons and width reduction by merging
//! each cluster into one representative.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{loss, train_model, Layer, Mlp, NnError, TrainConfig};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("layer {layer} is not a hidden layer of a {layers}-layer network")]
    InvalidLayer { layer: usize, layers: usize },
    #[error("cluster assignment does not partition {0} neurons")]
    InvalidAssignment(usize),
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("activation matrix: {0}")]
    Activations(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `ρ = 1 − E(XY)/√(E(X²)E(Y²))` with sample means; `ρ = 1` when either vector is all zero.
pub fn similarity(x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return 1.0;
    }
    (1.0 - xy / (xx * yy).sqrt()).clamp(0.0, 2.0)
}

/// Pairwise `ρ` between the columns (neurons) of `acts` (rows are samples).
pub fn distance_matrix(acts: &DMatrix<f64>) -> Result<DMatrix<f64>, PruneError> {
    if acts.iter().any(|v| !v.is_finite()) {
        return Err(PruneError::Activations("non-finite entry".into()));
    }
    let n = acts.ncols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| acts.column(j).iter().copied().collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { similarity(&cols[i], &cols[j]) }).collect())
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Partition of one layer's neurons. Clusters are ordered by representative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub clusters: Vec<Vec<usize>>,
    pub representatives: Vec<usize>,
}

impl ClusterAssignment {
    pub fn singletons(n: usize) -> Self {
        Self { clusters: (0..n).map(|i| vec![i]).collect(), representatives: (0..n).collect() }
    }

    pub fn neuron_count(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_trivial(&self) -> bool {
        self.clusters.iter().all(|c| c.len() == 1)
    }

    pub fn validate(&self, n: usize) -> Result<(), PruneError> {
        let mut seen = vec![false; n];
        if self.clusters.len() != self.representatives.len() {
            return Err(PruneError::InvalidAssignment(n));
        }
        for (c, &r) in self.clusters.iter().zip(&self.representatives) {
            if c.is_empty() || !c.contains(&r) {
                return Err(PruneError::InvalidAssignment(n));
            }
            for &i in c {
                if i >= n || seen[i] {
                    return Err(PruneError::InvalidAssignment(n));
                }
                seen[i] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(PruneError::InvalidAssignment(n))
        }
    }
}

/// Average-linkage agglomeration on `ρ`. Pairs merge while the closest
/// distance is `<= threshold`; a threshold of 0 disables merging. Ties go to
/// the lowest index pair. Representatives are medoids, lowest index on ties.
pub fn cluster_layer(acts: &DMatrix<f64>, threshold: f64) -> Result<ClusterAssignment, PruneError> {
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(PruneError::InvalidThreshold(threshold));
    }
    let n = acts.ncols();
    if threshold == 0.0 {
        return Ok(ClusterAssignment::singletons(n));
    }
    let dist = distance_matrix(acts)?;
    let mut link = dist.clone();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active = vec![true; n];
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if best.is_none_or(|(_, _, d)| link[(i, j)] < d) {
                    best = Some((i, j, link[(i, j)]));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d > threshold {
            break;
        }
        let (ni, nj) = (members[i].len() as f64, members[j].len() as f64);
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let merged = (ni * link[(i, k)] + nj * link[(j, k)]) / (ni + nj);
            link[(i, k)] = merged;
            link[(k, i)] = merged;
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        members[i].sort_unstable();
        active[j] = false;
    }
    let mut pairs: Vec<(usize, Vec<usize>)> = members
        .into_iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(c, _)| {
            let rep = *c
                .iter()
                .min_by(|&&a, &&b| {
                    let sa: f64 = c.iter().map(|&m| dist[(a, m)]).sum();
                    let sb: f64 = c.iter().map(|&m| dist[(b, m)]).sum();
                    sa.total_cmp(&sb).then(a.cmp(&b))
                })
                .expect("non-empty cluster");
            (rep, c)
        })
        .collect();
    pairs.sort_by_key(|(r, _)| *r);
    let (representatives, clusters) = pairs.into_iter().unzip();
    Ok(ClusterAssignment { clusters, representatives })
}

/// Replace each cluster of hidden layer `layer` by its representative. The
/// representative keeps its incoming weights and bias; its outgoing weights
/// become the sum over the cluster.
pub fn prune(mlp: &Mlp, layer: usize, clusters: &ClusterAssignment) -> Result<Mlp, PruneError> {
    let layers = mlp.layers();
    if layer + 1 >= layers.len() {
        return Err(PruneError::InvalidLayer { layer, layers: layers.len() });
    }
    let width = layers[layer].outputs();
    clusters.validate(width)?;
    let cur = &layers[layer];
    let next = &layers[layer + 1];
    let reps = &clusters.representatives;
    let pruned_cur = Layer {
        weights: DMatrix::from_fn(reps.len(), cur.inputs(), |r, c| cur.weights[(reps[r], c)]),
        bias: nalgebra::DVector::from_fn(reps.len(), |r, _| cur.bias[reps[r]]),
        activation: cur.activation,
    };
    let pruned_next = Layer {
        weights: DMatrix::from_fn(next.outputs(), reps.len(), |r, c| {
            clusters.clusters[c].iter().map(|&m| next.weights[(r, m)]).sum()
        }),
        bias: next.bias.clone(),
        activation: next.activation,
    };
    let mut out: Vec<Layer> = layers.to_vec();
    out[layer] = pruned_cur;
    out[layer + 1] = pruned_next;
    Ok(Mlp::new(out)?)
}

/// Cluster and prune every hidden layer. `hidden_acts[k]` holds layer `k`'s
/// activations (rows are samples).
pub fn prune_all(mlp: &Mlp, hidden_acts: &[DMatrix<f64>], threshold: f64) -> Result<(Mlp, Vec<ClusterAssignment>), PruneError> {
    let hidden = mlp.layers().len() - 1;
    if hidden_acts.len() != hidden {
        return Err(PruneError::Activations(format!("{} activation matrices for {hidden} hidden layers", hidden_acts.len())));
    }
    let assignments = hidden_acts
        .iter()
        .map(|a| cluster_layer(a, threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = mlp.clone();
    // Pruning layer k changes only layers k and k+1, so later assignments stay valid.
    for (k, a) in assignments.iter().enumerate() {
        if !a.is_trivial() {
            out = prune(&out, k, a)?;
        }
    }
    Ok((out, assignments))
}

/// Hidden-layer activations of `mlp` on column-per-sample `inputs`, transposed
/// so rows are samples.
pub fn hidden_activations(mlp: &Mlp, inputs: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, PruneError> {
    let mut acts = mlp.activations(inputs)?;
    acts.pop();
    Ok(acts.into_iter().map(|a| a.transpose()).collect())
}

/// Model-specific hooks of the prune-retrain loop.
pub trait PruneDriver {
    /// Hidden activations on the validation inputs, one matrix per hidden layer.
    fn activations(&self, mlp: &Mlp) -> Result<Vec<DMatrix<f64>>, PruneError>;
    fn train_loss(&self, mlp: &Mlp) -> Result<f64, PruneError>;
    fn validation_loss(&self, mlp: &Mlp) -> Result<f64, PruneError>;
    fn test_loss(&self, mlp: &Mlp) -> Result<Option<f64>, PruneError>;
    fn retrain(&mut self, mlp: Mlp) -> Result<Mlp, PruneError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRound {
    /// 0 is the unpruned model.
    pub round: usize,
    pub widths: Vec<usize>,
    pub val_before_retrain: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub rounds: Vec<PruneRound>,
    /// Round whose model was returned.
    pub kept_round: usize,
}

fn hidden_widths(mlp: &Mlp) -> Vec<usize> {
    let d = mlp.dims();
    d[1..d.len() - 1].to_vec()
}

/// Rounds of cluster, prune and retrain. Stops at the first round whose
/// validation loss exceeds the best so far, or when clustering merges
/// nothing, or after `max_rounds`. Returns the best-validation model.
pub fn prune_retrain_loop<D: PruneDriver>(
    mlp: Mlp,
    driver: &mut D,
    threshold: f64,
    max_rounds: usize,
) -> Result<(Mlp, PruneReport), PruneError> {
    if !(threshold >= 0.0) {
        return Err(PruneError::InvalidThreshold(threshold));
    }
    let v0 = driver.validation_loss(&mlp)?;
    let mut rounds = vec![PruneRound {
        round: 0,
        widths: hidden_widths(&mlp),
        val_before_retrain: v0,
        train_loss: driver.train_loss(&mlp)?,
        val_loss: v0,
        test_loss: driver.test_loss(&mlp)?,
    }];
    let mut best = (v0, mlp.clone(), 0);
    let mut current = mlp;
    for round in 1..=max_rounds {
        let acts = driver.activations(&current)?;
        let (pruned, assignments) = prune_all(&current, &acts, threshold)?;
        if assignments.iter().all(ClusterAssignment::is_trivial) {
            rounds.push(PruneRound {
                round,
                widths: hidden_widths(&current),
                val_before_retrain: best.0,
                train_loss: driver.train_loss(&current)?,
                val_loss: driver.validation_loss(&current)?,
                test_loss: driver.test_loss(&current)?,
            });
            break;
        }
        let before = driver.validation_loss(&pruned)?;
        let retrained = driver.retrain(pruned)?;
        let v = driver.validation_loss(&retrained)?;
        rounds.push(PruneRound {
            round,
            widths: hidden_widths(&retrained),
            val_before_retrain: before,
            train_loss: driver.train_loss(&retrained)?,
            val_loss: v,
            test_loss: driver.test_loss(&retrained)?,
        });
        if v > best.0 {
            break;
        }
        best = (v, retrained.clone(), round);
        current = retrained;
    }
    Ok((best.1, PruneReport { rounds, kept_round: best.2 }))
}

/// One row per round: `round,width_1..width_H,val_before_retrain,train_loss,val_loss,test_loss`.
pub fn write_prune_csv(path: impl AsRef<Path>, report: &PruneReport) -> Result<(), PruneError> {
    let depth = report.rounds.iter().map(|r| r.widths.len()).max().unwrap_or(0);
    let mut out = std::fs::File::create(path)?;
    let mut header = vec!["round".to_string()];
    header.extend((1..=depth).map(|k| format!("width_{k}")));
    header.extend(["val_before_retrain", "train_loss", "val_loss", "test_loss"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for r in &report.rounds {
        let mut row = vec![r.round.to_string()];
        row.extend(r.widths.iter().map(|w| w.to_string()));
        row.extend([r.val_before_retrain, r.train_loss, r.val_loss].map(|v| format!("{v:e}")));
        row.push(r.test_loss.map(|v| format!("{v:e}")).unwrap_or_default());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Driver over scaled column-per-sample data; retraining continues from the
/// pruned weights with `config`.
pub struct DataDriver<'a> {
    pub train: (&'a DMatrix<f64>, &'a DMatrix<f64>),
    pub val: (&'a DMatrix<f64>, &'a DMatrix<f64>),
    pub test: Option<(&'a DMatrix<f64>, &'a DMatrix<f64>)>,
    pub config: TrainConfig,
}

impl PruneDriver for DataDriver<'_> {
    fn activations(&self, mlp: &Mlp) -> Result<Vec<DMatrix<f64>>, PruneError> {
        hidden_activations(mlp, self.val.0)
    }

    fn train_loss(&self, mlp: &Mlp) -> Result<f64, PruneError> {
        Ok(loss(mlp, self.train.0, self.train.1)?)
    }

    fn validation_loss(&self, mlp: &Mlp) -> Result<f64, PruneError> {
        Ok(loss(mlp, self.val.0, self.val.1)?)
    }

    fn test_loss(&self, mlp: &Mlp) -> Result<Option<f64>, PruneError> {
        self.test.map(|(z, y)| loss(mlp, z, y)).transpose().map_err(Into::into)
    }

    fn retrain(&mut self, mlp: Mlp) -> Result<Mlp, PruneError> {
        Ok(train_model(mlp, self.train, self.val, &self.config)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        let x = [1.0, 2.0, -0.5];
        assert_eq!(similarity(&x, &x), 0.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((similarity(&x, &neg) - 2.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(similarity(&[0.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    fn acts_with_duplicate() -> DMatrix<f64> {
        // columns 0 and 2 are identical; 1 and 3 are unrelated
        DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 1.0, 0.3, //
            2.0, 1.0, 2.0, 0.0, //
            0.5, 0.0, 0.5, 1.0, //
            0.0, 3.0, 0.0, 0.2,
        ])
    }

    #[test]
    fn clustering_thresholds() {
        let a = acts_with_duplicate();
        assert!(cluster_layer(&a, 0.0).unwrap().is_trivial());
        let c = cluster_layer(&a, 0.0005).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 2], vec![1], vec![3]]);
        assert_eq!(c.representatives, vec![0, 1, 3]);
        let all = cluster_layer(&a, 2.0).unwrap();
        assert_eq!(all.clusters.len(), 1);
        assert_eq!(all.neuron_count(), 4);
        assert!(cluster_layer(&a, -1.0).is_err());
    }

    #[test]
    fn assignment_validation() {
        let bad = ClusterAssignment { clusters: vec![vec![0], vec![0, 1]], representatives: vec![0, 1] };
        assert!(bad.validate(2).is_err());
        assert!(ClusterAssignment::singletons(3).validate(3).is_ok());
        assert!(ClusterAssignment::singletons(2).validate(3).is_err());
    }

    #[test]
    fn invalid_layer_rejected() {
        let net = crate::nn::init_he(&[2, 3, 1], 0).unwrap();
        assert!(matches!(
            prune(&net, 1, &ClusterAssignment::singletons(1)),
            Err(PruneError::InvalidLayer { .. })
        ));
    }
}

//! Model file: a JSON manifest plus a little-endian `f64` weight blob stored
//! next to it. The blob lists layers in order, each as its row-major weight
//! matrix followed by its bias.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Activation, Estimator, Layer, Mlp, NnError, Scaler, StateLayout};
use crate::sampling::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub scaler: Scaler,
    pub layout: StateLayout,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    /// File name of the weight blob, relative to the manifest.
    pub weights_file: String,
    pub weights_sha256: String,
}

/// Write `<path>` (manifest) and `<path stem>.bin` (weights).
pub fn save_estimator(
    path: impl AsRef<Path>,
    estimator: &Estimator,
    seed: u64,
    config_sha256: Option<String>,
) -> Result<ModelManifest, NnError> {
    let path = path.as_ref();
    let bin = path.with_extension("bin");
    let blob: Vec<u8> = estimator.mlp.parameters().iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = ModelManifest {
        dims: estimator.mlp.dims(),
        activations: estimator.mlp.layers().iter().map(|l| l.activation).collect(),
        scaler: estimator.scaler.clone(),
        layout: estimator.layout.clone(),
        seed,
        config_sha256,
        weights_file: bin.file_name().and_then(|n| n.to_str()).unwrap_or("model.bin").to_string(),
        weights_sha256: sha256_hex(&blob),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, &blob)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NnError::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(manifest)
}

pub fn load_estimator(path: impl AsRef<Path>) -> Result<(Estimator, ModelManifest), NnError> {
    let path = path.as_ref();
    let manifest: ModelManifest =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| NnError::Format(e.to_string()))?;
    let bin = path.with_file_name(&manifest.weights_file);
    let blob = fs::read(&bin)?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(NnError::Format(format!("{} does not match its manifest digest", bin.display())));
    }
    if manifest.dims.len() < 2 || manifest.activations.len() + 1 != manifest.dims.len() {
        return Err(NnError::Format("dims and activations disagree".into()));
    }
    let layers = manifest
        .dims
        .windows(2)
        .zip(&manifest.activations)
        .map(|(w, &activation)| Layer {
            weights: DMatrix::zeros(w[1], w[0]),
            bias: DVector::zeros(w[1]),
            activation,
        })
        .collect();
    let mut mlp = Mlp::new(layers)?;
    if blob.len() != 8 * mlp.parameter_count() {
        return Err(NnError::Format(format!(
            "weight blob has {} bytes, expected {}",
            blob.len(),
            8 * mlp.parameter_count()
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    mlp.set_parameters(&params)?;
    let estimator = Estimator { mlp, scaler: manifest.scaler.clone(), layout: manifest.layout.clone() };
    Ok((estimator, manifest))
}

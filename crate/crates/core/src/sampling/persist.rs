//! Training set directory: `states.csv`, `measurements.csv` and `manifest.json`.
//!
//! The manifest records SHA-256 digests of both CSV files; reading a set
//! whose files do not match fails.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Sample, SamplingError, TrainingSet};
use crate::grid::Network;
use crate::powerflow::{injections_of, MeasurementModel, MeasurementSpec, MeasurementVector, StateVector};

const STATES: &str = "states.csv";
const MEASUREMENTS: &str = "measurements.csv";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetManifest {
    pub seed: u64,
    pub attempted: usize,
    pub failures: usize,
    pub samples: usize,
    pub spec: MeasurementSpec,
    /// RNG stream of each row.
    pub stream_indices: Vec<u64>,
    pub states_sha256: String,
    pub measurements_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<Vec<u8>, SamplingError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| SamplingError::Format(e.to_string());
    w.write_record(header).map_err(fmt)?;
    for row in rows {
        // `{:?}` prints the shortest representation that round-trips exactly.
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(fmt)?;
    }
    w.into_inner().map_err(|e| SamplingError::Format(e.to_string()))
}

fn state_header(network: &Network) -> Vec<String> {
    let bps = network.bus_phases();
    let mut h: Vec<String> = bps.iter().map(|bp| format!("V_b{}_p{}", bp.bus, bp.phase)).collect();
    h.extend(bps.iter().map(|bp| format!("theta_b{}_p{}", bp.bus, bp.phase)));
    h
}

/// Write `set` into `dir`, creating it if needed.
pub fn write_training_set(
    dir: impl AsRef<Path>,
    network: &Network,
    set: &TrainingSet,
    config_sha256: Option<String>,
) -> Result<TrainingSetManifest, SamplingError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let states = csv_bytes(&state_header(network), set.samples.iter().map(|s| s.state.to_coordinates()))?;
    let labels: Vec<String> = set.spec.channels.iter().map(|c| c.label()).collect();
    let measurements = csv_bytes(
        &labels,
        set.samples.iter().map(|s| {
            s.z.values.iter().zip(&s.z.valid).map(|(&v, &ok)| if ok { v } else { f64::NAN }).collect()
        }),
    )?;
    let manifest = TrainingSetManifest {
        seed: set.seed,
        attempted: set.attempted,
        failures: set.failures,
        samples: set.samples.len(),
        spec: set.spec.clone(),
        stream_indices: set.samples.iter().map(|s| s.index).collect(),
        states_sha256: sha256_hex(&states),
        measurements_sha256: sha256_hex(&measurements),
        config_sha256,
    };
    fs::write(dir.join(STATES), states)?;
    fs::write(dir.join(MEASUREMENTS), measurements)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SamplingError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(manifest)
}

fn read_rows(bytes: &[u8], width: usize, what: &str) -> Result<Vec<Vec<f64>>, SamplingError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| SamplingError::Format(format!("{what}: {e}")))?;
        if rec.len() != width {
            return Err(SamplingError::Format(format!("{what}: row has {} fields, expected {width}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| SamplingError::Format(format!("{what}: {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read a set written by [`write_training_set`]. Clean values and injections
/// are recomputed from the stored states.
pub fn read_training_set(dir: impl AsRef<Path>, network: &Network) -> Result<TrainingSet, SamplingError> {
    let dir = dir.as_ref();
    let manifest: TrainingSetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| SamplingError::Format(format!("{MANIFEST}: {e}")))?;
    let states = fs::read(dir.join(STATES))?;
    let measurements = fs::read(dir.join(MEASUREMENTS))?;
    if sha256_hex(&states) != manifest.states_sha256 {
        return Err(SamplingError::Format(format!("{STATES} does not match its manifest digest")));
    }
    if sha256_hex(&measurements) != manifest.measurements_sha256 {
        return Err(SamplingError::Format(format!("{MEASUREMENTS} does not match its manifest digest")));
    }
    let n = network.bus_phase_count();
    let x_rows = read_rows(&states, 2 * n, STATES)?;
    let z_rows = read_rows(&measurements, manifest.spec.len(), MEASUREMENTS)?;
    if x_rows.len() != manifest.samples || z_rows.len() != manifest.samples || manifest.stream_indices.len() != manifest.samples {
        return Err(SamplingError::Format("row counts disagree with the manifest".into()));
    }
    let model = MeasurementModel::new(network, &manifest.spec)?;
    let mut samples = Vec::with_capacity(manifest.samples);
    for ((x, z), &index) in x_rows.into_iter().zip(z_rows).zip(&manifest.stream_indices) {
        let state = StateVector::from_coordinates(&x);
        let clean = model.evaluate(&state)?;
        let injection = injections_of(network, &state)?;
        let valid = z.iter().map(|v| !v.is_nan()).collect();
        samples.push(Sample { index, injection, state, clean, z: MeasurementVector { values: z, valid } });
    }
    Ok(TrainingSet {
        samples,
        seed: manifest.seed,
        spec: manifest.spec,
        attempted: manifest.attempted,
        failures: manifest.failures,
    })
}

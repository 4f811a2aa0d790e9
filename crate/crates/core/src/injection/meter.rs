//! Meter data file: CSV with header `meter_id,interval_index,energy`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{downscale_mixture, fit_gmm_em, ARModel, EmOptions, GaussianMixture, LearnError};

/// Slow-timescale readings of one meter; each reading sums `aggregation` fast intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSeries {
    pub meter_id: String,
    pub aggregation: usize,
    pub readings: Vec<f64>,
}

impl MeterSeries {
    pub fn new(meter_id: impl Into<String>, aggregation: usize, readings: Vec<f64>) -> Result<Self, LearnError> {
        if aggregation == 0 {
            return Err(LearnError::InvalidInput("aggregation factor must be at least 1".into()));
        }
        if readings.iter().any(|r| !r.is_finite()) {
            return Err(LearnError::InvalidInput("meter readings must be finite".into()));
        }
        Ok(Self { meter_id: meter_id.into(), aggregation, readings })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeterRow {
    meter_id: String,
    interval_index: u64,
    energy: f64,
}

/// Read a meter file; rows may come in any order and are sorted by interval index.
pub fn read_meter_csv(path: impl AsRef<Path>, aggregation: usize) -> Result<Vec<MeterSeries>, LearnError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| LearnError::Meter(e.to_string()))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(u64, f64)>> = HashMap::new();
    for rec in reader.deserialize::<MeterRow>() {
        let row = rec.map_err(|e| LearnError::Meter(e.to_string()))?;
        let entry = rows.entry(row.meter_id.clone()).or_insert_with(|| {
            order.push(row.meter_id.clone());
            Vec::new()
        });
        entry.push((row.interval_index, row.energy));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut r = rows.remove(&id).expect("grouped");
        r.sort_by_key(|(i, _)| *i);
        if r.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(LearnError::Meter(format!("meter {id} has duplicate interval indices")));
        }
        out.push(MeterSeries::new(id, aggregation, r.into_iter().map(|(_, e)| e).collect())?);
    }
    Ok(out)
}

pub fn write_meter_csv(path: impl AsRef<Path>, series: &[MeterSeries]) -> Result<(), LearnError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LearnError::Meter(e.to_string()))?;
    for s in series {
        for (i, &energy) in s.readings.iter().enumerate() {
            w.serialize(MeterRow { meter_id: s.meter_id.clone(), interval_index: i as u64, energy })
                .map_err(|e| LearnError::Meter(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fit a `k`-component mixture to the meter readings and convert it to the fast timescale.
pub fn learn_fast_mixture(
    series: &MeterSeries,
    ars: &[ARModel],
    k: usize,
    options: &EmOptions,
) -> Result<GaussianMixture, LearnError> {
    let fit = fit_gmm_em(&series.readings, k, options)?;
    downscale_mixture(&fit.mixture, ars, series.aggregation)
}

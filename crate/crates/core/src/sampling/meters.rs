//! Synthetic smart-meter data and the reverse path from meter files to
//! per-bus injection distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BusPhaseDistribution, SamplingError, ScenarioDistributions};
use crate::injection::{
    build_autocovariance_system, learn_fast_mixture, ARModel, EmOptions, GaussianMixture, LearnError,
    MeterSeries,
};

/// Sum consecutive blocks of `t` fast readings.
pub fn synthesize_meter_series(id: &str, fast: &[f64], t: usize) -> Result<MeterSeries, LearnError> {
    if t == 0 {
        return Err(LearnError::InvalidInput("aggregation factor must be at least 1".into()));
    }
    if fast.len() % t != 0 {
        return Err(LearnError::InvalidInput(format!(
            "series length {} is not a multiple of {t}",
            fast.len()
        )));
    }
    let readings = fast.chunks_exact(t).map(|c| c.iter().sum()).collect();
    MeterSeries::new(id, t, readings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSynthesis {
    /// Fast intervals per meter reading.
    pub aggregation: usize,
    /// Meter readings per series.
    pub readings: usize,
    /// Shape of the fast-timescale fluctuation within a reading.
    pub ar: ARModel,
}

/// Stationary variance of `ar` per unit innovation variance.
fn stationary_variance(ar: &ARModel) -> Result<f64, LearnError> {
    let unit = ARModel { innovation_variance: 1.0, innovation_mean: 0.0, ..ar.clone() };
    let t = unit.order() + 1;
    let a = build_autocovariance_system(&unit, t)?;
    let mut e1 = nalgebra::DVector::zeros(t);
    e1[0] = 1.0;
    let c = (nalgebra::DMatrix::identity(t, t) - a)
        .lu()
        .solve(&e1)
        .ok_or(LearnError::Singular { component: None })?;
    Ok(c[0])
}

fn meter_id(kind: &str, bus: u32, phase: u8) -> String {
    format!("{kind}_b{bus}_p{phase}")
}

fn parse_meter_id(id: &str) -> Option<(bool, u32, u8)> {
    let (kind, rest) = id.split_once("_b")?;
    let (bus, phase) = rest.split_once("_p")?;
    let gen = match kind {
        "load" => false,
        "gen" => true,
        _ => return None,
    };
    Some((gen, bus.parse().ok()?, phase.parse().ok()?))
}

/// One meter series per load and generation mixture. Within every reading a
/// component is drawn once and the fast values follow `ar`, rescaled so each
/// fast value has that component's mean and variance.
pub fn simulate_meter_data<R: Rng + ?Sized>(
    dists: &ScenarioDistributions,
    synth: &MeterSynthesis,
    rng: &mut R,
) -> Result<Vec<MeterSeries>, LearnError> {
    synth.ar.validate()?;
    if synth.aggregation == 0 || synth.readings == 0 {
        return Err(LearnError::InvalidInput("aggregation and reading count must be positive".into()));
    }
    let c0 = stationary_variance(&synth.ar)?;
    let centred = ARModel { innovation_mean: 0.0, ..synth.ar.clone() };
    let burn_in = 10 * (synth.ar.order() + 1);
    let mut out = Vec::new();
    for e in &dists.entries {
        let parts = [("load", Some(&e.load)), ("gen", e.generation.as_ref())];
        for (kind, mix) in parts {
            let Some(mix) = mix else { continue };
            let mut readings = Vec::with_capacity(synth.readings);
            for _ in 0..synth.readings {
                let i = pick_component(mix, rng);
                let scale = (mix.variances[i] / c0).sqrt();
                let path = centred.simulate(synth.aggregation, burn_in, rng);
                readings.push(path.iter().map(|y| mix.means[i] + scale * y).sum());
            }
            out.push(MeterSeries::new(meter_id(kind, e.bus, e.phase), synth.aggregation, readings)?);
        }
    }
    Ok(out)
}

fn pick_component<R: Rng + ?Sized>(mix: &GaussianMixture, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in mix.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    mix.weights.len() - 1
}

/// Fit fast-timescale mixtures to meter series named `load_b<bus>_p<phase>` or
/// `gen_b<bus>_p<phase>`.
pub fn learn_distributions(
    series: &[MeterSeries],
    ars: &[ARModel],
    components: usize,
    options: &EmOptions,
) -> Result<ScenarioDistributions, SamplingError> {
    let mut entries: Vec<BusPhaseDistribution> = Vec::new();
    let mut gens: Vec<(u32, u8, GaussianMixture)> = Vec::new();
    for s in series {
        let (gen, bus, phase) = parse_meter_id(&s.meter_id)
            .ok_or_else(|| SamplingError::Distributions(format!("unrecognised meter id {:?}", s.meter_id)))?;
        let fast = learn_fast_mixture(s, ars, components, options)?;
        if gen {
            gens.push((bus, phase, fast));
        } else {
            entries.push(BusPhaseDistribution::load_only(bus, phase, fast));
        }
    }
    for (bus, phase, g) in gens {
        let e = entries
            .iter_mut()
            .find(|e| e.bus == bus && e.phase == phase)
            .ok_or_else(|| SamplingError::Distributions(format!("generation meter for bus {bus} has no load meter")))?;
        e.generation = Some(g);
    }
    Ok(ScenarioDistributions { entries })
}

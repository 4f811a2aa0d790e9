#![allow(dead_code)]

use bayes_dsse::grid::{Branch, Bus, BusKind, Network};
use bayes_dsse::injection::GaussianMixture;
use bayes_dsse::powerflow::{Channel, MeasurementSpec};
use bayes_dsse::sampling::{BusPhaseDistribution, ScenarioDistributions};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn phases(phase_count: u8) -> Vec<u8> {
    (1..=phase_count).collect()
}

/// Series admittance of an impedance block with symmetric mutual coupling.
fn series_block<R: Rng>(phase_count: u8, rng: &mut R) -> DMatrix<Complex64> {
    let n = phase_count as usize;
    let z_self = Complex64::new(rng.random_range(0.005..0.05), rng.random_range(0.01..0.08));
    let z_mut = z_self * rng.random_range(0.1..0.4);
    let z = DMatrix::from_fn(n, n, |r, c| if r == c { z_self } else { z_mut });
    z.try_inverse().expect("diagonally dominant impedance")
}

/// Radial network of `buses` buses (bus 1 is the slack). Every non-root bus
/// hangs off a uniformly chosen earlier bus.
pub fn random_radial<R: Rng>(buses: u32, phase_count: u8, shunts: bool, rng: &mut R) -> Network {
    let bus_list = (1..=buses)
        .map(|id| Bus { id, kind: if id == 1 { BusKind::Slack } else { BusKind::PQ }, phases: phases(phase_count) })
        .collect();
    let branches = (2..=buses)
        .map(|to| {
            let from = rng.random_range(1..to);
            let mut b = Branch::new(from, to, series_block(phase_count, rng));
            if shunts {
                let n = phase_count as usize;
                let y = Complex64::new(0.0, rng.random_range(1e-4..1e-3));
                b.shunt_from = Some(DMatrix::from_diagonal_element(n, n, y));
                b.shunt_to = Some(DMatrix::from_diagonal_element(n, n, y));
            }
            b
        })
        .collect();
    Network::new(phase_count, 1.0, bus_list, branches).expect("valid radial network")
}

/// Every channel type at every location.
pub fn full_spec(network: &Network) -> MeasurementSpec {
    let mut channels = Vec::new();
    for bp in network.bus_phases() {
        channels.push(Channel::Pinj { bus: bp.bus, phase: bp.phase });
        channels.push(Channel::Qinj { bus: bp.bus, phase: bp.phase });
    }
    for (b, br) in network.branches().iter().enumerate() {
        for &phase in &network.bus(br.from).expect("branch end").phases {
            channels.push(Channel::Pflow { branch: b, phase });
            channels.push(Channel::Qflow { branch: b, phase });
            channels.push(Channel::Imag { branch: b, phase });
        }
    }
    MeasurementSpec::new(channels)
}

/// Pinj and Qinj at every non-slack bus-phase, in free-index order.
pub fn injection_spec(network: &Network) -> MeasurementSpec {
    let bps = network.bus_phases();
    let mut channels = Vec::new();
    for i in network.free_indices() {
        let bp = bps[i];
        channels.push(Channel::Pinj { bus: bp.bus, phase: bp.phase });
        channels.push(Channel::Qinj { bus: bp.bus, phase: bp.phase });
    }
    MeasurementSpec::new(channels)
}

/// Independent Gaussian load of `mean ± rel·mean` at every non-slack bus-phase.
pub fn gaussian_loads(network: &Network, mean: f64, rel: f64) -> ScenarioDistributions {
    let bps = network.bus_phases();
    let entries = network
        .free_indices()
        .into_iter()
        .map(|i| {
            let bp = bps[i];
            BusPhaseDistribution::load_only(bp.bus, bp.phase, GaussianMixture::gaussian(mean, (rel * mean).powi(2)))
        })
        .collect();
    ScenarioDistributions { entries }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

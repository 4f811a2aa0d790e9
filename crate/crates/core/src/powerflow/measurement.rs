use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{PowerFlowError, StateVector};
use crate::grid::{build_ybus, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    Pinj,
    Qinj,
    Pflow,
    Qflow,
    Imag,
}

/// One sensor reading. Flow and current channels are taken at the `from`
/// end of the branch, identified by its 0-based position in the grid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Channel {
    Pinj { bus: u32, phase: u8 },
    Qinj { bus: u32, phase: u8 },
    Pflow { branch: usize, phase: u8 },
    Qflow { branch: usize, phase: u8 },
    Imag { branch: usize, phase: u8 },
}

impl Channel {
    pub fn kind(&self) -> ChannelKind {
        match self {
            Channel::Pinj { .. } => ChannelKind::Pinj,
            Channel::Qinj { .. } => ChannelKind::Qinj,
            Channel::Pflow { .. } => ChannelKind::Pflow,
            Channel::Qflow { .. } => ChannelKind::Qflow,
            Channel::Imag { .. } => ChannelKind::Imag,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Channel::Pinj { bus, phase } => format!("Pinj_b{bus}_p{phase}"),
            Channel::Qinj { bus, phase } => format!("Qinj_b{bus}_p{phase}"),
            Channel::Pflow { branch, phase } => format!("Pflow_br{branch}_p{phase}"),
            Channel::Qflow { branch, phase } => format!("Qflow_br{branch}_p{phase}"),
            Channel::Imag { branch, phase } => format!("Imag_br{branch}_p{phase}"),
        }
    }
}

/// Ordered sensor list; the order is the index order of `z`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementSpec {
    pub channels: Vec<Channel>,
}

impl MeasurementSpec {
    pub fn new(channels: Vec<Channel>) -> Self {
        Self { channels }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Readings aligned with a [`MeasurementSpec`]. `valid[i] == false` marks a missing channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Self {
        let valid = vec![true; values.len()];
        Self { values, valid }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Quantity {
    Real,
    Imag,
    Magnitude,
}

/// `a · conj(Σ c_m v_m)` for P/Q channels, `|Σ c_m v_m|` for current channels.
#[derive(Debug, Clone)]
struct CompiledChannel {
    quantity: Quantity,
    voltage_index: usize,
    coeffs: Vec<(usize, Complex64)>,
}

/// Measurement function compiled against a network. Cheap to evaluate many times.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    n: usize,
    channels: Vec<CompiledChannel>,
}

fn branch_row(network: &Network, branch: usize, local: usize, from_end: bool) -> (usize, Vec<(usize, Complex64)>) {
    let br = &network.branches()[branch];
    let (near, far, shunt) = if from_end {
        (br.from, br.to, &br.shunt_from)
    } else {
        (br.to, br.from, &br.shunt_to)
    };
    let ni = network.bus_offset(near).expect("validated");
    let fi = network.bus_offset(far).expect("validated");
    let p = br.series.nrows();
    let mut coeffs = Vec::with_capacity(3 * p);
    for l in 0..p {
        let mut own = br.series[(local, l)];
        if let Some(sh) = shunt {
            own += sh[(local, l)];
        }
        coeffs.push((ni + l, own));
        coeffs.push((fi + l, -br.series[(local, l)]));
    }
    (ni + local, coeffs)
}

impl MeasurementModel {
    pub fn new(network: &Network, spec: &MeasurementSpec) -> Result<Self, PowerFlowError> {
        let y = build_ybus(network);
        let n = network.bus_phase_count();
        let mut channels = Vec::with_capacity(spec.len());
        for ch in &spec.channels {
            let compiled = match *ch {
                Channel::Pinj { bus, phase } | Channel::Qinj { bus, phase } => {
                    let idx = network
                        .bus_phase_index(bus, phase)
                        .ok_or_else(|| PowerFlowError::UnknownChannel(ch.label()))?;
                    let coeffs = (0..n)
                        .map(|m| (m, y.0[(idx, m)]))
                        .filter(|(_, c)| *c != Complex64::new(0.0, 0.0))
                        .collect();
                    CompiledChannel {
                        quantity: if ch.kind() == super::ChannelKind::Pinj {
                            Quantity::Real
                        } else {
                            Quantity::Imag
                        },
                        voltage_index: idx,
                        coeffs,
                    }
                }
                Channel::Pflow { branch, phase }
                | Channel::Qflow { branch, phase }
                | Channel::Imag { branch, phase } => {
                    let br = network
                        .branches()
                        .get(branch)
                        .ok_or_else(|| PowerFlowError::UnknownChannel(ch.label()))?;
                    let local = network
                        .bus(br.from)
                        .and_then(|b| b.phases.iter().position(|&p| p == phase))
                        .ok_or_else(|| PowerFlowError::UnknownChannel(ch.label()))?;
                    let (voltage_index, coeffs) = branch_row(network, branch, local, true);
                    let quantity = match ch.kind() {
                        super::ChannelKind::Pflow => Quantity::Real,
                        super::ChannelKind::Qflow => Quantity::Imag,
                        _ => Quantity::Magnitude,
                    };
                    CompiledChannel { quantity, voltage_index, coeffs }
                }
            };
            channels.push(compiled);
        }
        Ok(Self { n, channels })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn check(&self, state: &StateVector) -> Result<(), PowerFlowError> {
        if state.magnitude.len() != self.n || state.angle.len() != self.n {
            return Err(PowerFlowError::Dimension(format!(
                "state has {} entries, model expects {}",
                state.magnitude.len(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, state: &StateVector) -> Result<Vec<f64>, PowerFlowError> {
        self.check(state)?;
        let v = state.phasors();
        Ok(self.channels.iter().map(|ch| eval_channel(ch, &v)).collect())
    }

    /// Jacobian of `h` with columns ordered `[θ_0 .. θ_{n-1}, V_0 .. V_{n-1}]`
    /// over the full bus-phase numbering (slack phases included).
    pub fn jacobian(&self, state: &StateVector) -> Result<DMatrix<f64>, PowerFlowError> {
        self.check(state)?;
        let n = self.n;
        let v = state.phasors();
        let j = Complex64::new(0.0, 1.0);
        // dv/dθ = j v, dv/dV = e^{jθ}
        let dv_dtheta: Vec<Complex64> = v.iter().map(|&x| j * x).collect();
        let dv_dmag: Vec<Complex64> = state.angle.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
        let mut jac = DMatrix::zeros(self.channels.len(), 2 * n);
        for (r, ch) in self.channels.iter().enumerate() {
            let b: Complex64 = ch.coeffs.iter().map(|&(m, c)| c * v[m]).sum();
            match ch.quantity {
                Quantity::Real | Quantity::Imag => {
                    let a = v[ch.voltage_index];
                    let pick = |s: Complex64| if ch.quantity == Quantity::Real { s.re } else { s.im };
                    for &(m, c) in &ch.coeffs {
                        jac[(r, m)] += pick(a * (c * dv_dtheta[m]).conj());
                        jac[(r, n + m)] += pick(a * (c * dv_dmag[m]).conj());
                    }
                    let a_idx = ch.voltage_index;
                    jac[(r, a_idx)] += pick(dv_dtheta[a_idx] * b.conj());
                    jac[(r, n + a_idx)] += pick(dv_dmag[a_idx] * b.conj());
                }
                Quantity::Magnitude => {
                    let mag = b.norm();
                    // |b| is not differentiable at 0; use the zero subgradient.
                    if mag > 1e-14 {
                        for &(m, c) in &ch.coeffs {
                            jac[(r, m)] += (b.conj() * c * dv_dtheta[m]).re / mag;
                            jac[(r, n + m)] += (b.conj() * c * dv_dmag[m]).re / mag;
                        }
                    }
                }
            }
        }
        Ok(jac)
    }
}

fn eval_channel(ch: &CompiledChannel, v: &[Complex64]) -> f64 {
    let b: Complex64 = ch.coeffs.iter().map(|&(m, c)| c * v[m]).sum();
    match ch.quantity {
        Quantity::Real => (v[ch.voltage_index] * b.conj()).re,
        Quantity::Imag => (v[ch.voltage_index] * b.conj()).im,
        Quantity::Magnitude => b.norm(),
    }
}

/// Evaluate `h(x)` from the phasor identities `S_i = v_i conj((Y v)_i)` and
/// `S_ij = v_i conj(y_series (v_i - v_j) + y_shunt v_i)`.
pub fn evaluate_h(
    state: &StateVector,
    network: &Network,
    spec: &MeasurementSpec,
) -> Result<MeasurementVector, PowerFlowError> {
    state.check(network)?;
    let model = MeasurementModel::new(network, spec)?;
    Ok(MeasurementVector::new(model.evaluate(state)?))
}

/// Analytic `∂h/∂x`; see [`MeasurementModel::jacobian`] for the column order.
pub fn measurement_jacobian(
    state: &StateVector,
    network: &Network,
    spec: &MeasurementSpec,
) -> Result<DMatrix<f64>, PowerFlowError> {
    state.check(network)?;
    MeasurementModel::new(network, spec)?.jacobian(state)
}

/// Per-phase branch current phasors leaving the chosen end (shunt included).
pub fn branch_end_current(
    network: &Network,
    state: &StateVector,
    branch: usize,
    from_end: bool,
) -> Vec<Complex64> {
    let v = state.phasors();
    let p = network.branches()[branch].series.nrows();
    (0..p)
        .map(|k| {
            let (_, coeffs) = branch_row(network, branch, k, from_end);
            coeffs.iter().map(|&(m, c)| c * v[m]).sum()
        })
        .collect()
}

/// Per-phase complex power leaving the chosen end of a branch.
pub fn branch_end_power(
    network: &Network,
    state: &StateVector,
    branch: usize,
    from_end: bool,
) -> Vec<Complex64> {
    let v = state.phasors();
    let p = network.branches()[branch].series.nrows();
    (0..p)
        .map(|k| {
            let (vi, coeffs) = branch_row(network, branch, k, from_end);
            let i: Complex64 = coeffs.iter().map(|&(m, c)| c * v[m]).sum();
            v[vi] * i.conj()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusKind};

    fn two_bus() -> Network {
        Network::new(
            1,
            1.0,
            vec![
                Bus { id: 1, kind: BusKind::Slack, phases: vec![1] },
                Bus { id: 2, kind: BusKind::PQ, phases: vec![1] },
            ],
            vec![Branch::single(1, 2, Complex64::new(0.0, -10.0))],
        )
        .unwrap()
    }

    fn all_channels(net: &Network) -> MeasurementSpec {
        let mut ch = Vec::new();
        for bp in net.bus_phases() {
            ch.push(Channel::Pinj { bus: bp.bus, phase: bp.phase });
            ch.push(Channel::Qinj { bus: bp.bus, phase: bp.phase });
        }
        for (b, br) in net.branches().iter().enumerate() {
            for &phase in &net.bus(br.from).unwrap().phases {
                ch.push(Channel::Pflow { branch: b, phase });
                ch.push(Channel::Qflow { branch: b, phase });
                ch.push(Channel::Imag { branch: b, phase });
            }
        }
        MeasurementSpec::new(ch)
    }

    #[test]
    fn flat_state_gives_zero_everything() {
        let net = two_bus();
        let z = evaluate_h(&StateVector::flat(&net), &net, &all_channels(&net)).unwrap();
        assert!(z.values.iter().all(|v| v.abs() < 1e-14), "{:?}", z.values);
    }

    #[test]
    fn two_bus_active_injection() {
        let net = two_bus();
        let state = StateVector { magnitude: vec![1.0, 1.0], angle: vec![0.0, -0.1] };
        let spec = MeasurementSpec::new(vec![Channel::Pinj { bus: 1, phase: 1 }]);
        let z = evaluate_h(&state, &net, &spec).unwrap();
        // P1 = V1 V2 b sin(θ1 - θ2) with b = 10
        assert!((z.values[0] - 10.0 * 0.1f64.sin()).abs() < 1e-12);
        assert!((z.values[0] - 0.99833).abs() < 1e-5);
    }

    #[test]
    fn equal_end_voltages_carry_no_current() {
        let net = two_bus();
        let state = StateVector { magnitude: vec![1.03, 1.03], angle: vec![0.2, 0.2] };
        let spec = MeasurementSpec::new(vec![Channel::Imag { branch: 0, phase: 1 }]);
        let z = evaluate_h(&state, &net, &spec).unwrap();
        assert!(z.values[0].abs() < 1e-14);
    }

    #[test]
    fn flat_jacobian_of_own_injection() {
        let net = two_bus();
        let spec = MeasurementSpec::new(vec![Channel::Pinj { bus: 1, phase: 1 }]);
        let jac = measurement_jacobian(&StateVector::flat(&net), &net, &spec).unwrap();
        // d/dθ1 of 10 sin(θ1 - θ2) at 0
        assert!((jac[(0, 0)] - 10.0).abs() < 1e-12);
        assert!((jac[(0, 1)] + 10.0).abs() < 1e-12);
        assert!(jac[(0, 2)].abs() < 1e-12 && jac[(0, 3)].abs() < 1e-12);
    }

    #[test]
    fn open_branch_current_row_is_zero() {
        let net = Network::new(
            1,
            1.0,
            vec![
                Bus { id: 1, kind: BusKind::Slack, phases: vec![1] },
                Bus { id: 2, kind: BusKind::PQ, phases: vec![1] },
            ],
            vec![
                Branch::single(1, 2, Complex64::new(1.0, -10.0)),
                Branch::single(1, 2, Complex64::new(0.0, 0.0)),
            ],
        )
        .unwrap();
        let spec = MeasurementSpec::new(vec![Channel::Imag { branch: 1, phase: 1 }]);
        let state = StateVector { magnitude: vec![1.0, 0.97], angle: vec![0.0, -0.05] };
        let jac = measurement_jacobian(&state, &net, &spec).unwrap();
        assert!(jac.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_references_rejected() {
        let net = two_bus();
        for ch in [
            Channel::Pinj { bus: 9, phase: 1 },
            Channel::Qinj { bus: 1, phase: 2 },
            Channel::Imag { branch: 4, phase: 1 },
        ] {
            let err = MeasurementModel::new(&net, &MeasurementSpec::new(vec![ch])).unwrap_err();
            assert!(matches!(err, PowerFlowError::UnknownChannel(_)));
        }
    }

    #[test]
    fn spec_serializes_with_kind_tag() {
        let spec = MeasurementSpec::new(vec![
            Channel::Pinj { bus: 1, phase: 1 },
            Channel::Imag { branch: 3, phase: 2 },
        ]);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            text,
            r#"[{"kind":"Pinj","bus":1,"phase":1},{"kind":"Imag","branch":3,"phase":2}]"#
        );
        let back: MeasurementSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
